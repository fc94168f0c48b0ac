# %%
# Running Imports #

import json
from pathlib import Path
from typing import Callable, Iterable, List, Optional

import numpy as np
import pandas as pd
import torch
from readable_utils.display_tools import pprint_df, print_logger  # noqa F401
from scipy.io import wavfile

from config import AUDIO_RATE, runs_dir
from errors import InvalidArgumentError, PathCollisionError
from signals import CueStream, Waveform

ARTIFACT_MANIFEST = "artifacts.json"
# 16-bit PCM on disk
PCM_FULL_SCALE = 32767
SUBDIRS = {
    "audio": "audio",
    "cues": "cues",
    "manifests": "manifests",
    "reports": "reports",
    "traces": "traces",
    "checkpoints": "checkpoints",
}


# %%
# Storage #


class RunStorage:
    """All file I/O of one run directory, with a read cache and an artifact list"""

    def __init__(self, run_name: str = "default", root: Optional[Path] = None, overwrite=False):
        self.root = Path(root) if root is not None else Path(runs_dir) / run_name
        self.overwrite = overwrite
        self.root.mkdir(parents=True, exist_ok=True)
        self._dict_cache = {}

    def path(self, kind: str, name: str) -> Path:
        if kind not in SUBDIRS:
            raise InvalidArgumentError(f"unknown artifact kind {kind!r}")
        folder = self.root / SUBDIRS[kind]
        folder.mkdir(parents=True, exist_ok=True)
        return folder / name

    def _claim(self, path: Path, allow_overwrite=False) -> Path:
        if path.exists() and not (self.overwrite or allow_overwrite):
            raise PathCollisionError(f"{path} already exists")
        self._dict_cache.pop(str(path), None)
        return path

    def _get_cached(self, path: Path, loader: Callable, force_update=False):
        """Generic method to read and cache a file"""
        key = str(path)
        if key in self._dict_cache and not force_update:
            return self._dict_cache[key]
        if not path.exists():
            raise FileNotFoundError(f"{path} does not exist")
        value = loader(path)
        self._dict_cache[key] = value
        return value

    # Audio #

    def write_wav(self, name: str, wave: Waveform, allow_overwrite=False) -> Path:
        path = self._claim(self.path("audio", f"{name}.wav"), allow_overwrite)
        pcm = np.round(np.clip(wave.samples, -1.0, 1.0) * PCM_FULL_SCALE).astype(np.int16)
        wavfile.write(path, wave.rate, pcm)
        return path

    def read_wav(self, name: str, force_update=False) -> Waveform:
        def load(path):
            rate, samples = wavfile.read(path)
            scale = PCM_FULL_SCALE if np.issubdtype(samples.dtype, np.integer) else 1.0
            return Waveform(np.asarray(samples, dtype=np.float64) / scale, int(rate))

        return self._get_cached(self.path("audio", f"{name}.wav"), load, force_update)

    # Cues #

    def write_cues(self, name: str, cues: CueStream) -> Path:
        path = self._claim(self.path("cues", f"{name}.csv"))
        df_cues = pd.DataFrame(cues.frames, columns=[f"f{i}" for i in range(cues.dim)])
        df_clean = pd.DataFrame(cues.clean_frames, columns=[f"clean{i}" for i in range(cues.dim)])
        df_cues = pd.concat([df_cues, df_clean], axis=1)
        df_cues["label"] = cues.impairment_mask
        df_cues.to_csv(path, index=False)

        sidecar = self._claim(self.path("cues", f"{name}.json"))
        sidecar.write_text(
            json.dumps(
                {
                    "frame_rate": cues.frame_rate,
                    "dim": cues.dim,
                    "switch_time_s": cues.switch_time_s,
                    "impaired_fraction": cues.impaired_fraction,
                },
                indent=2,
            )
        )
        return path

    def read_cues(self, name: str, force_update=False) -> CueStream:
        def load(path):
            meta = json.loads(path.with_suffix(".json").read_text())
            df_cues = pd.read_csv(path, keep_default_na=False)
            dim = int(meta["dim"])
            return CueStream(
                frames=df_cues[[f"f{i}" for i in range(dim)]].to_numpy(dtype=np.float64),
                frame_rate=float(meta["frame_rate"]),
                impairment_mask=df_cues["label"].astype(str).to_numpy(),
                clean_frames=df_cues[[f"clean{i}" for i in range(dim)]].to_numpy(dtype=np.float64),
                switch_time_s=meta["switch_time_s"],
            )

        return self._get_cached(self.path("cues", f"{name}.csv"), load, force_update)

    # Manifests, reports, traces #

    def write_manifest(self, name: str, records: Iterable[dict]) -> Path:
        path = self._claim(self.path("manifests", f"{name}.jsonl"))
        with open(path, "w") as f:
            for record in records:
                f.write(json.dumps(record, sort_keys=True) + "\n")
        print_logger(f"Manifest {name} written")
        return path

    def read_manifest(self, name: str, force_update=False) -> List[dict]:
        def load(path):
            with open(path) as f:
                return [json.loads(line) for line in f if line.strip()]

        return self._get_cached(self.path("manifests", f"{name}.jsonl"), load, force_update)

    def write_report(self, name: str, df: pd.DataFrame) -> Path:
        path = self._claim(self.path("reports", f"{name}.csv"), allow_overwrite=True)
        df.to_csv(path, index=False)
        print_logger(f"Report {name} updated successfully")
        return path

    def read_report(self, name: str, force_update=False) -> pd.DataFrame:
        return self._get_cached(
            self.path("reports", f"{name}.csv"), pd.read_csv, force_update
        ).copy()

    def write_json(self, name: str, payload: dict) -> Path:
        path = self._claim(self.path("reports", f"{name}.json"), allow_overwrite=True)
        path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=str))
        return path

    def write_trace(self, name: str, trace: Iterable) -> Path:
        path = self._claim(self.path("traces", f"{name}.jsonl"), allow_overwrite=True)
        with open(path, "w") as f:
            for entry in trace:
                record = entry.to_dict() if hasattr(entry, "to_dict") else dict(entry)
                f.write(json.dumps(record) + "\n")
        return path

    # Checkpoints #

    def checkpoint_path(self, name: str) -> Path:
        return self.path("checkpoints", f"{name}.pt")

    def has_checkpoint(self, name: str) -> bool:
        return self.checkpoint_path(name).exists()

    def save_checkpoint(self, name: str, payload: dict) -> Path:
        path = self._claim(self.checkpoint_path(name), allow_overwrite=True)
        torch.save(payload, path)
        return path

    def load_checkpoint(self, name: str) -> dict:
        path = self.checkpoint_path(name)
        if not path.exists():
            raise FileNotFoundError(f"checkpoint {path} does not exist")
        return torch.load(path, map_location="cpu", weights_only=False)

    def list_artifacts(self) -> List[str]:
        return sorted(
            str(p.relative_to(self.root))
            for p in self.root.rglob("*")
            if p.is_file() and p.name != ARTIFACT_MANIFEST
        )

    def write_artifact_manifest(self) -> Path:
        """artifacts.json listing every file produced in the run directory"""
        path = self.root / ARTIFACT_MANIFEST
        path.write_text(
            json.dumps({"root": str(self.root), "artifacts": self.list_artifacts()}, indent=2)
        )
        return path


# %%
# Main #

if __name__ == "__main__":
    storage = RunStorage("scratch", overwrite=True)
    storage.write_wav("tone", Waveform(np.sin(np.arange(AUDIO_RATE) * 0.05)))
    print(storage.read_wav("tone").duration_s)


# %%
