import sys

from cohnet.cli import main

sys.exit(main())
