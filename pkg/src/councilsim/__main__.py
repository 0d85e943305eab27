import sys

from councilsim.cli import main

sys.exit(main())
