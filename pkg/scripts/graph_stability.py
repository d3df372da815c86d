"""Non-symmetric vs symmetric GCN on a stochastic block model graph.

    python3 scripts/graph_stability.py --out runs/graph
"""
import sys

from _compare import parser, run

from stablequant.experiments import GRAPH_STABILITY

if __name__ == "__main__":
    args = parser(__doc__.splitlines()[0], ("gcn_nonsym", "gcn_sym")).parse_args()
    run(GRAPH_STABILITY, args)
    sys.exit(0)
