# %%
# Imports #

import os
import sys
from os.path import expanduser

home_dir = expanduser("~")
file_dir = os.path.dirname(os.path.realpath(__file__))
parent_dir = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

data_dir = os.path.join(parent_dir, "data")
log_dir = os.path.join(parent_dir, "logs")
runs_dir = os.path.join(parent_dir, "runs")
src_dir = os.path.join(parent_dir, "src")

directories = [
    data_dir,
    log_dir,
    runs_dir,
]
for directory in directories:
    if not os.path.exists(directory):
        print(f"Creating directory: {directory}")
        os.makedirs(directory, exist_ok=True)

sys.path.append(file_dir)
sys.path.append(parent_dir)
sys.path.append(src_dir)


# %%
# Constants #

AUDIO_RATE = 16000
FRAME_RATE = 25
HOP = 160
CUE_DIM = 8


if __name__ == "__main__":
    print(f"parent_dir: {parent_dir}")
    print(f"data_dir: {data_dir}")
    print(f"runs_dir: {runs_dir}")


# %%
