import sys

from glstm.cli import main

sys.exit(main())
