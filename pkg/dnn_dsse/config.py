import os
import sys
import copy
import json
import hashlib
import logging
import yaml

PATH_SUFFIXES = ('_file', '_dir')
LOG_FORMAT = '%(asctime)s - %(levelname)s - %(message)s'


class Config:

    def __init__(self):
        self.config_data = None
        self.config_path = None
        self.initialized = False

    def _data(self) -> dict:
        if not self.initialized:
            raise RuntimeError("Configuration not loaded. Call load_config first.")
        return self.config_data

    def load_config(self, config_path):
        """
        Load an experiment configuration. The file may be written in YAML or in JSON syntax, the latter being a subset
        of the former. String values under keys ending in `_file` or `_dir` are resolved relative to the directory
        that holds the config file.
        :param config_path: Location of the configuration file
        """
        if not os.path.exists(config_path):
            raise FileNotFoundError(f"Config file not found: {config_path}")

        with open(config_path, 'r') as config_file:
            try:
                data = yaml.safe_load(config_file)
            except yaml.YAMLError as e:
                raise yaml.YAMLError(f"Error parsing config file: {e}")

        if data is None:
            data = {}
        if not isinstance(data, dict):
            raise ValueError(f"Config file must hold a mapping at the top level: {config_path}")
        self._adopt(data, config_path)

    @classmethod
    def from_dict(cls, data, config_path=None):
        """
        Build an initialized Config directly from a mapping, e.g. inside tests or when a manifest is replayed.
        :param data: A dict of configuration values
        :param config_path: Optional path used for relative path resolution
        :return: A Config object
        """
        config = cls()
        config._adopt(copy.deepcopy(data), config_path)
        return config

    def _adopt(self, data, config_path):
        self.config_data = data
        self.config_path = config_path
        if config_path is not None:
            config_dir = os.path.dirname(os.path.abspath(config_path))
            for key, value in data.items():
                if isinstance(value, str) and not os.path.isabs(value) and key.endswith(PATH_SUFFIXES):
                    data[key] = os.path.join(config_dir, value)
        self.initialized = True

    def get(self, key, default=None):
        return self._data().get(key, default)

    def section(self, key):
        """
        Return a nested section as a dict, or an empty dict if the section is absent.
        :param key: Name of the section
        :return: A dict
        """
        value = self.get(key) or {}
        if not isinstance(value, dict):
            raise ValueError(f"Config section '{key}' must be a mapping, got {type(value).__name__}")
        return value

    def set(self, key, value):
        self._data()[key] = value

    def detach(self):
        clone = Config()
        clone.config_data = copy.deepcopy(self._data())
        clone.config_path = self.config_path
        clone.initialized = True
        return clone

    def local_clone(self, updates=None):
        clone = self.detach()
        for key, value in (updates or {}).items():
            clone.set(key, value)
        return clone

    def config_hash(self):
        """
        SHA-256 over the canonical JSON encoding of the configuration. Embedded in every artifact so that it can be
        traced back to the settings that produced it.
        :return: A hex digest string
        """
        canonical = json.dumps(self._data(), sort_keys=True, separators=(',', ':'), default=str)
        return hashlib.sha256(canonical.encode('utf-8')).hexdigest()

    def __getitem__(self, key):
        return self._data()[key]

    def __contains__(self, key):
        return key in self._data()

    def __str__(self):
        status = "Initialized" if self.initialized else "Not Initialized"
        return f"Config Object ({status}):\n  Config Path: {self.config_path}\n  Config Data: {self.config_data}"

    def __repr__(self):
        return f"Config(initialized={self.initialized}, config_path='{self.config_path}')"

    def setup_logging(self, cmd_log_level=None):
        """
        Configure the root logger once per process. The command-line level wins over `log_level`; an empty
        `log_file` logs to the terminal.
        """
        log_level = cmd_log_level or self.get('log_level', 'INFO')
        numeric_level = getattr(logging, str(log_level).upper(), None)
        if not isinstance(numeric_level, int):
            raise ValueError(f'Invalid log level: {log_level}')

        logging.basicConfig(level=numeric_level, format=LOG_FORMAT, filename=self.get('log_file') or None,
                            filemode='a')
        sys.excepthook = exception_handler


def exception_handler(exc_type, exc_value, exc_traceback):
    if issubclass(exc_type, KeyboardInterrupt):
        sys.__excepthook__(exc_type, exc_value, exc_traceback)
        return
    logging.error("Uncaught exception", exc_info=(exc_type, exc_value, exc_traceback))
