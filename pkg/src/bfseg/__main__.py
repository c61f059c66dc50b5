import sys

from bfseg.cli import main

sys.exit(main())
