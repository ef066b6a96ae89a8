import sys

from flowsolve.cli import main

sys.exit(main())
