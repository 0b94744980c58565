import os
import glob
import json
import hashlib
import logging
from typing import Optional, Tuple
from dnn_dsse.dataset import Dataset

"""
artifacts.py

Write-once artifact directory. Every file name carries the artifact kind, the first characters of the config hash
that produced it and a digest of its content, so rewriting an artifact either hits the identical file or creates a
new one. JSON artifacts embed their provenance (config hash and seed).
"""

DIGEST_CHARS = 12


class ArtifactStore:

    def __init__(self, root: str):
        self.root = root
        os.makedirs(root, exist_ok=True)

    @classmethod
    def digest(cls, data: bytes) -> str:
        return hashlib.sha256(data).hexdigest()[:DIGEST_CHARS]

    def _name(self, kind: str, config_hash: str, content: bytes, extension: str) -> str:
        return os.path.join(self.root, f"{kind}-{config_hash[:DIGEST_CHARS]}-{self.digest(content)}.{extension}")

    def _write_once(self, path: str, content: bytes) -> str:
        try:
            with open(path, 'xb') as handle:
                handle.write(content)
            logging.info(f"Wrote {path}")
        except FileExistsError:
            with open(path, 'rb') as handle:
                if handle.read() != content:
                    raise FileExistsError(f"Artifact {path} exists with different content")
            logging.info(f"Artifact {path} already present")
        return path

    def write_json(self, kind: str, document: dict, config_hash: str, seed: int) -> str:
        """
        Store a JSON document with a provenance block.
        :return: Path of the artifact
        """
        document = dict(document, provenance={'config_hash': config_hash, 'seed': seed, 'kind': kind})
        content = json.dumps(document, sort_keys=True, indent=1, default=str).encode('utf-8')
        return self._write_once(self._name(kind, config_hash, content, 'json'), content)

    def write_bytes(self, kind: str, content: bytes, config_hash: str, extension: str) -> str:
        return self._write_once(self._name(kind, config_hash, content, extension), content)

    def write_text(self, kind: str, text: str, config_hash: str, extension: str = 'txt') -> str:
        return self.write_bytes(kind, text.encode('utf-8'), config_hash, extension)

    def write_dataset(self, kind: str, dataset: Dataset, config_hash: str, seed: int) -> str:
        """
        Store a dataset as CSV plus its manifest sidecar under one content digest.
        :return: Path of the CSV file; the manifest sits at '<path>.manifest.json'
        """
        dataset.manifest = dict(dataset.manifest, config_hash=config_hash, seed=seed)
        csv_text, manifest_text = dataset.to_text()
        csv_bytes, manifest_bytes = csv_text.encode('utf-8'), manifest_text.encode('utf-8')
        path = self._name(kind, config_hash, csv_bytes + manifest_bytes, 'csv')
        self._write_once(path, csv_bytes)
        self._write_once(f"{path}.manifest.json", manifest_bytes)
        return path

    def find(self, kind: str, config_hash: Optional[str] = None, extension: str = '*') -> Optional[str]:
        """
        Most recently written artifact of a kind, optionally restricted to one config hash.
        :return: A path or None
        """
        prefix = config_hash[:DIGEST_CHARS] if config_hash else '*'
        matches = [p for p in glob.glob(os.path.join(self.root, f"{kind}-{prefix}-*.{extension}"))
                   if not p.endswith('.manifest.json')]
        if not matches:
            return None
        return max(matches, key=lambda p: (os.path.getmtime(p), p))

    @classmethod
    def read_json(cls, path: str) -> Tuple[dict, dict]:
        """
        :return: (document without provenance, provenance)
        """
        with open(path, 'r') as handle:
            document = json.load(handle)
        provenance = document.pop('provenance', {})
        return document, provenance
