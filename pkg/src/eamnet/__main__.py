import sys

from eamnet.cli import main

sys.exit(main())
