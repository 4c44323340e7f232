# ==============================================================================
# FILE: app.py
#
# PURPOSE: Command-line launcher for the ICL lab: toy-model pretraining,
#          filter injection, cloud metrics, head scans and ablations.
#
# USAGE: Run `python app.py <verb> --help`, e.g.
#        `python app.py pretrain --task ambiguous --out models/toy.twb`
#        `python app.py measure --by k --model models/toy.twb --out results`
# ==============================================================================

import sys

from icl_lab.cli import main

# ==============================================================================
# APPLICATION ENTRY POINT
# ==============================================================================

if __name__ == "__main__":
    sys.exit(main())
