import sys

from copaintlab.cli import main

sys.exit(main())
