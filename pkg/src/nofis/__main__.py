import sys

from nofis.cli import main

sys.exit(main())
