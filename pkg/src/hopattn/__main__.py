import sys

from hopattn.expt.cli import main

sys.exit(main())
