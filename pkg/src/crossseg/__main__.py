import sys

from crossseg.cli import main

sys.exit(main())
