import sys

from uncert_snn.cli import cli_main

if __name__ == "__main__":
    # Parse arguments, run the subcommand and hand its status to the shell
    sys.exit(cli_main())
