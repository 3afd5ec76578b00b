import sys
from pathlib import Path

# shared oracles live in sibling test modules
sys.path.insert(0, str(Path(__file__).parent))
