import sys

from hffed.cli import main

sys.exit(main())
