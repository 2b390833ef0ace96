import sys

from cfgrl.cli import main

sys.exit(main())
