import sys

from flowlm.cli import main

sys.exit(main())
