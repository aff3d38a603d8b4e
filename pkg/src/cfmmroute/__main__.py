import sys

from cfmmroute.cli import main

sys.exit(main())
