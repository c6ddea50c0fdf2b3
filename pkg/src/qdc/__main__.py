import sys

from qdc.cli import main

sys.exit(main())
