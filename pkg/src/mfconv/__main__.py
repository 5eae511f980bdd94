import sys

from mfconv.cli import main

sys.exit(main())
