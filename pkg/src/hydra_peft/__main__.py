import sys

from hydra_peft.cli import main

sys.exit(main())
