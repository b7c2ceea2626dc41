from overlapckpt.cli import main
import sys

sys.exit(main())
