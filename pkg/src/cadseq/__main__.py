import sys

from cadseq.cli import main

sys.exit(main())
