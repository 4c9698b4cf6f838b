"""
File Handlers Module
Utility functions for file I/O: JSON, CSV, WAV, blobs and checkpoints
"""

import hashlib
import json
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
import pandas as pd
from loguru import logger
from scipy.io import wavfile

from backend.utils.errors import DataIntegrityError

CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_GROUPS = ('params', 'm', 'v')


class FileHandler:
    """Handles file operations below one base directory"""

    def __init__(self, base_directory: Union[str, Path] = "data", subdirectories: Tuple[str, ...] = ()):
        """
        Initialize file handler

        Args:
            base_directory: Base directory for file operations
            subdirectories: Subdirectories created up front
        """
        self.base_directory = Path(base_directory)
        self._ensure_directories(subdirectories)

    def _ensure_directories(self, subdirectories: Tuple[str, ...]):
        """Ensure required directories exist"""
        self.base_directory.mkdir(parents=True, exist_ok=True)
        for name in subdirectories:
            (self.base_directory / name).mkdir(parents=True, exist_ok=True)

    def save_json_data(self, data: Dict[str, Any], filename: str, subdirectory: str = "") -> str:
        """
        Save data as JSON file

        Args:
            data: Data to save
            filename: Name of the file
            subdirectory: Subdirectory to save in

        Returns:
            str: Path to saved file
        """
        try:
            file_path = self._get_file_path(filename, subdirectory, "json")
            file_path.parent.mkdir(parents=True, exist_ok=True)
            with open(file_path, 'w', encoding='utf-8') as f:
                json.dump(data, f, indent=2, sort_keys=True, default=str)
            logger.debug(f"JSON data saved to {file_path}")
            return str(file_path)
        except Exception as e:
            logger.error(f"Error saving JSON data: {str(e)}")
            raise

    def append_jsonl(self, record: Dict[str, Any], filename: str, subdirectory: str = "") -> str:
        """Append one JSON object as a line"""
        file_path = self._get_file_path(filename, subdirectory, "jsonl")
        with open(file_path, 'a', encoding='utf-8') as f:
            f.write(json.dumps(record, sort_keys=True) + "\n")
        return str(file_path)

    def load_jsonl(self, filename: str, subdirectory: str = "") -> pd.DataFrame:
        """Read a JSON-lines file into a DataFrame"""
        file_path = self._get_file_path(filename, subdirectory, "jsonl")
        if not file_path.exists():
            raise DataIntegrityError(f"Log file not found: {file_path}")
        return pd.read_json(file_path, lines=True)

    def save_csv_data(self, data: pd.DataFrame, filename: str, subdirectory: str = "") -> str:
        """
        Save DataFrame as CSV file

        Args:
            data: DataFrame to save
            filename: Name of the file
            subdirectory: Subdirectory to save in

        Returns:
            str: Path to saved file
        """
        try:
            file_path = self._get_file_path(filename, subdirectory, "csv")
            file_path.parent.mkdir(parents=True, exist_ok=True)
            data.to_csv(file_path, index=False, float_format='%.10g')
            logger.debug(f"CSV data saved to {file_path}")
            return str(file_path)
        except Exception as e:
            logger.error(f"Error saving CSV data: {str(e)}")
            raise

    def load_csv_data(self, filename: str, subdirectory: str = "") -> pd.DataFrame:
        """Load data from CSV file"""
        file_path = self._get_file_path(filename, subdirectory, "csv")
        if not file_path.exists():
            raise DataIntegrityError(f"CSV file not found: {file_path}")
        return pd.read_csv(file_path)

    def write_wav(self, samples: np.ndarray, sample_rate: int, filename: str, subdirectory: str = "") -> str:
        """Write mono audio in [-1, 1] as 16-bit PCM"""
        file_path = self._get_file_path(filename, subdirectory, "wav")
        file_path.parent.mkdir(parents=True, exist_ok=True)
        pcm = np.round(np.clip(samples, -1.0, 1.0) * 32767.0).astype('<i2')
        wavfile.write(file_path, sample_rate, pcm)
        return str(file_path)

    def read_wav(self, filename: str, subdirectory: str = "") -> Tuple[np.ndarray, int]:
        """
        Read a WAV file as float64 mono in [-1, 1]

        Multi-channel files are averaged down to one channel.
        """
        file_path = self._get_file_path(filename, subdirectory, "wav")
        if not file_path.exists():
            raise DataIntegrityError(f"WAV file not found: {file_path}")
        try:
            sample_rate, data = wavfile.read(file_path)
        except ValueError as e:
            logger.error(f"Error reading WAV file: {str(e)}")
            raise DataIntegrityError(f"Unreadable WAV file {file_path}: {e}") from e
        if np.issubdtype(data.dtype, np.integer):
            samples = data.astype(np.float64) / float(np.iinfo(data.dtype).max)
        else:
            samples = data.astype(np.float64)
        if samples.ndim == 2:
            samples = samples.mean(axis=1)
        return np.clip(samples, -1.0, 1.0), int(sample_rate)

    def write_blob(self, array: np.ndarray, filename: str, subdirectory: str = "",
                   extra: Optional[Dict[str, Any]] = None) -> str:
        """
        Write an array as a JSON header line followed by little-endian values

        Args:
            array: Array to store
            filename: Name of the file
            subdirectory: Subdirectory to save in
            extra: Additional header fields (fps, frame_hop, ...)

        Returns:
            str: Path to saved file
        """
        file_path = self._get_file_path(filename, subdirectory, "blob")
        file_path.parent.mkdir(parents=True, exist_ok=True)
        data = np.ascontiguousarray(array)
        little = data.astype(data.dtype.newbyteorder('<'), copy=False)
        header = {'shape': list(data.shape), 'dtype': data.dtype.name, 'little_endian': True}
        header.update(extra or {})
        with open(file_path, 'wb') as f:
            f.write((json.dumps(header, sort_keys=True) + "\n").encode('utf-8'))
            f.write(little.tobytes())
        return str(file_path)

    def read_blob(self, filename: str, subdirectory: str = "") -> Tuple[np.ndarray, Dict[str, Any]]:
        """Read a blob written by write_blob; returns (array, header)"""
        file_path = self._get_file_path(filename, subdirectory, "blob")
        if not file_path.exists():
            raise DataIntegrityError(f"Blob not found: {file_path}")
        raw = file_path.read_bytes()
        newline = raw.find(b"\n")
        if newline < 0:
            raise DataIntegrityError(f"Blob {file_path} has no header")
        try:
            header = json.loads(raw[:newline].decode('utf-8'))
            dtype = np.dtype(header['dtype']).newbyteorder('<')
            shape = tuple(header['shape'])
        except (ValueError, KeyError, TypeError) as e:
            raise DataIntegrityError(f"Blob {file_path} has a corrupt header: {e}") from e
        payload = raw[newline + 1:]
        expected = int(np.prod(shape)) * dtype.itemsize
        if len(payload) != expected:
            raise DataIntegrityError(f"Blob {file_path} holds {len(payload)} bytes, expected {expected}")
        array = np.frombuffer(payload, dtype=dtype).reshape(shape).astype(dtype.newbyteorder('='))
        return array, header

    def save_checkpoint(self, step: int, groups: Mapping[str, Mapping[str, np.ndarray]],
                        meta: Optional[Dict[str, Any]] = None) -> str:
        """
        Write ckpt_<step>.bin (float64 little-endian) and its JSON manifest

        Args:
            step: Training step the state belongs to
            groups: {'params': ..., 'm': ..., 'v': ...} name -> array maps
            meta: Extra manifest fields (seed, optimizer step, ...)

        Returns:
            str: Path to the manifest
        """
        try:
            entries = []
            chunks = []
            offset = 0
            for group in CHECKPOINT_GROUPS:
                for name in sorted(groups.get(group, {})):
                    values = np.ascontiguousarray(groups[group][name], dtype='<f8')
                    entries.append({'name': name, 'group': group, 'shape': list(values.shape),
                                    'offset': offset, 'count': int(values.size)})
                    chunks.append(values.tobytes())
                    offset += values.size
            payload = b"".join(chunks)
            bin_path = self._get_file_path(f"ckpt_{step}", "", "bin")
            bin_path.write_bytes(payload)

            manifest = {
                'format_version': CHECKPOINT_FORMAT_VERSION,
                'step': int(step),
                'dtype': 'float64',
                'entries': entries,
                'sha256': hashlib.sha256(payload).hexdigest(),
                'created': datetime.now().isoformat(),
            }
            manifest.update(meta or {})
            manifest_path = self.save_json_data(manifest, f"ckpt_{step}")
            logger.info(f"Checkpoint for step {step} written to {manifest_path}")
            return manifest_path
        except Exception as e:
            logger.error(f"Error saving checkpoint: {str(e)}")
            raise

    def load_checkpoint(self, manifest_path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, Dict[str, np.ndarray]]]:
        """
        Load and verify a checkpoint

        Args:
            manifest_path: Path to ckpt_<step>.json

        Returns:
            Tuple: (manifest, {'params': ..., 'm': ..., 'v': ...})
        """
        manifest_path = Path(manifest_path)
        if not manifest_path.is_file():
            raise DataIntegrityError(f"Checkpoint manifest not found: {manifest_path}")
        try:
            manifest = json.loads(manifest_path.read_text(encoding='utf-8'))
        except json.JSONDecodeError as e:
            raise DataIntegrityError(f"Corrupt checkpoint manifest {manifest_path}: {e}") from e
        if manifest.get('format_version') != CHECKPOINT_FORMAT_VERSION:
            raise DataIntegrityError(f"Unsupported checkpoint format: {manifest.get('format_version')}")

        bin_path = manifest_path.with_suffix('.bin')
        if not bin_path.is_file():
            raise DataIntegrityError(f"Checkpoint payload not found: {bin_path}")
        payload = bin_path.read_bytes()
        if hashlib.sha256(payload).hexdigest() != manifest.get('sha256'):
            raise DataIntegrityError(f"Checkpoint {bin_path} failed its integrity check")

        values = np.frombuffer(payload, dtype='<f8')
        groups: Dict[str, Dict[str, np.ndarray]] = {group: {} for group in CHECKPOINT_GROUPS}
        for entry in manifest['entries']:
            start, count = entry['offset'], entry['count']
            if start + count > values.size:
                raise DataIntegrityError(f"Checkpoint entry {entry['name']} exceeds the payload")
            array = values[start:start + count].astype(np.float64).reshape(entry['shape'])
            groups[entry['group']][entry['name']] = array
        logger.info(f"Checkpoint for step {manifest['step']} loaded from {manifest_path}")
        return manifest, groups

    def list_checkpoints(self) -> List[Path]:
        """Checkpoint manifests sorted by step"""
        manifests = self.base_directory.glob("ckpt_*.json")
        return sorted(manifests, key=lambda p: int(p.stem.split('_', 1)[1]))

    def latest_checkpoint(self) -> Optional[Path]:
        checkpoints = self.list_checkpoints()
        return checkpoints[-1] if checkpoints else None

    def file_checksum(self, filename: str, subdirectory: str = "") -> str:
        """SHA-256 of a file's bytes"""
        file_path = self._get_file_path(filename, subdirectory)
        return hashlib.sha256(file_path.read_bytes()).hexdigest()

    def _get_file_path(self, filename: str, subdirectory: str = "", extension: str = "") -> Path:
        """
        Get full file path

        Args:
            filename: Name of the file
            subdirectory: Subdirectory
            extension: File extension

        Returns:
            Path: Full file path
        """
        if not filename.endswith(f".{extension}") and extension:
            filename = f"{filename}.{extension}"

        if subdirectory:
            return self.base_directory / subdirectory / filename
        else:
            return self.base_directory / filename
