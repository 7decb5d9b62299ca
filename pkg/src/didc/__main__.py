import sys

from didc.cli import main

sys.exit(main())
