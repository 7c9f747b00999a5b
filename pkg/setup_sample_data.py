"""
Quick setup script to generate a sample dataset for the desk preset
"""
import sys
from pathlib import Path

from mtdnet.core.config import settings
from mtdnet.main import cli_main


def create_sample_data() -> int:
    """Write train/test splits of the desk dataset under MTDNET_DATA_DIR"""
    out = Path(settings.data_dir) / "desk"
    if (out / "train" / "manifest.csv").is_file():
        print(f"Sample data already exists in {out}")
        return 0
    config = Path(__file__).parent / "configs" / "desk.cfg"
    return cli_main(["gen-data", "--config", str(config), "--out", str(out)])


if __name__ == "__main__":
    code = create_sample_data()
    if code == 0:
        print("\nNext steps:")
        print("  python -m mtdnet train --config configs/desk.cfg --data data/desk --out runs/desk")
        print("  python -m mtdnet eval --checkpoint runs/desk/checkpoint.mtd --data data/desk")
    sys.exit(code)
