import sys

from dvwfed.cli import main

sys.exit(main())
