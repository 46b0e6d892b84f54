import sys

from dnr.cli import main

sys.exit(main())
