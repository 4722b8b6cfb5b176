import sys

from raid.cli import main

sys.exit(main())
