"""Dataset manifests: JSON lists of audio and annotation files."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field


@dataclass
class DatasetManifest:
    """
    Dataset description: entries of ``(track_id, audio path, annotation
    path)``, the dataset name and its bar length in beats.
    """

    dataset_name: str
    meter: int
    entries: list = field(default_factory=list)
    root: str = '.'

    def resolve(self, path):
        return path if os.path.isabs(path) else os.path.join(self.root, path)

    def to_json(self):
        return {'dataset_name': self.dataset_name, 'meter': self.meter,
                'entries': [{'id': tid, 'audio': audio, 'annotations': ann}
                            for tid, audio, ann in self.entries]}

    def save(self, path):
        with open(path, 'w', encoding='utf-8') as fh:
            json.dump(self.to_json(), fh, indent=2)
            fh.write('\n')

    @classmethod
    def load(cls, path, check_paths=True):
        """Read a manifest; relative paths resolve against its directory."""
        with open(path, encoding='utf-8') as fh:
            data = json.load(fh)
        try:
            entries = [(str(e['id']), e['audio'], e['annotations'])
                       for e in data['entries']]
            manifest = cls(str(data['dataset_name']), int(data['meter']),
                           entries, os.path.dirname(os.path.abspath(path)))
        except (KeyError, TypeError) as exc:
            raise ValueError(f'{path}: malformed manifest ({exc})') from exc
        ids = [e[0] for e in entries]
        if len(set(ids)) != len(ids):
            raise ValueError(f'{path}: duplicate track ids')
        if check_paths:
            for tid, audio, ann in entries:
                for p in (audio, ann):
                    if not os.path.exists(manifest.resolve(p)):
                        raise FileNotFoundError(
                            f'{path}: track {tid}: missing file {p}')
        return manifest
