import sys

from tollsim.cli import main

sys.exit(main())
