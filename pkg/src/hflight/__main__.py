import sys

from hflight.cli import main

sys.exit(main())
