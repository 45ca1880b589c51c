import sys
from pathlib import Path

# make tests/oracles importable as `oracles` regardless of invocation dir
sys.path.insert(0, str(Path(__file__).parent))
