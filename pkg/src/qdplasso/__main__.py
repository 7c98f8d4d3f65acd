import sys

from qdplasso.cli import main

sys.exit(main())
