import sys

from slf.cli import main

sys.exit(main())
