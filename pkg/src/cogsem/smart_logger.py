import json
import math
import os
import shutil
import sys
import threading
import time
from datetime import datetime
from typing import Any, Optional

import numpy as np
import torch


class SmartLogger:
    """
    JSONL flow logger shared by every cogsem module.

    Each entry carries a level, a message, a category (the calling module's LOG_CATEGORY)
    and a parameter summary. Payloads longer than ``max_inline_chars`` are written to a
    separate detail file and referenced from the main log. Tensors and arrays are never
    dumped; they are summarised by shape, dtype and finite range.

    All defaults can be overridden with ``SMART_LOGGER_*`` environment variables.
    """

    LEVEL_PRIORITY = {
        "DEBUG": 0,
        "INFO": 1,
        "WARNING": 2,
        "ERROR": 3,
        "CRITICAL": 4
    }
    _instance = None

    @classmethod
    def instance(cls):
        if cls._instance is None:
            cls._instance = cls()
        return cls._instance

    @classmethod
    def configure(cls, **kwargs) -> "SmartLogger":
        """Replace the singleton, e.g. to log into a run directory."""
        cls._instance = cls(**kwargs)
        return cls._instance

    @classmethod
    def log(cls, level, message, category=None, params=None, max_inline_chars=200):
        cls.instance()._log(level, message, category, params, max_inline_chars)

    def __init__(self,
                 main_log_path=None,
                 detail_log_dir=None,
                 blacklisted_log_path=None,
                 min_level=None,
                 console_output=None,
                 file_output=None,
                 remove_log_on_create=None):
        self.main_log_path = self._get_env_variable(
            main_log_path, "MAIN_LOG_PATH", "logs/cogsem_flow.jsonl"
        )
        self.detail_log_dir = self._get_env_variable(
            detail_log_dir, "DETAIL_LOG_DIR", "logs/details"
        )
        self.blacklisted_log_path = self._get_env_variable(
            blacklisted_log_path, "BLACKLISTED_LOG_PATH", "logs/cogsem_flow_blacklisted.jsonl"
        )
        self.min_level = self._get_env_variable(min_level, "MIN_LEVEL", "INFO")
        self.console_output = self._get_env_variable(
            str(console_output) if console_output is not None else None, "CONSOLE_OUTPUT", "True"
        ) == "True"
        self.file_output = self._get_env_variable(
            str(file_output) if file_output is not None else None, "FILE_OUTPUT", "False"
        ) == "True"
        self.remove_log_on_create = self._get_env_variable(
            str(remove_log_on_create) if remove_log_on_create is not None else None,
            "REMOVE_LOG_ON_CREATE", "False"
        ) == "True"

        self._lock = threading.Lock()
        self._last_timestamp = None
        self._timestamp_counter = 0
        self.blacklist_categories = self._load_blacklist_categories()

        if self.file_output:
            dir_paths = [
                os.path.dirname(self.main_log_path) or ".",
                self.detail_log_dir,
                os.path.dirname(self.blacklisted_log_path) or ".",
            ]
            if self.remove_log_on_create:
                for path in (self.main_log_path, self.blacklisted_log_path):
                    if os.path.exists(path):
                        os.remove(path)
                if os.path.exists(self.detail_log_dir):
                    shutil.rmtree(self.detail_log_dir)
            for dir_path in dir_paths:
                os.makedirs(dir_path, exist_ok=True)

    def _get_env_variable(self, direct_value: Optional[str], env_key: str, default: str) -> str:
        if direct_value is not None:
            return direct_value
        return os.environ.get(f"SMART_LOGGER_{env_key}", default)

    def _load_blacklist_categories(self):
        # SMART_LOGGER_BLACKLIST_CATEGORIES="PRIOR,METRICS" routes those categories aside
        blacklist_env = os.environ.get("SMART_LOGGER_BLACKLIST_CATEGORIES", "")
        if not blacklist_env:
            return set()
        return {cat.strip() for cat in blacklist_env.split(",") if cat.strip()}

    def _is_blacklisted(self, category):
        if category is None:
            return False
        return category in self.blacklist_categories

    def _generate_unique_trace_id(self):
        current_timestamp = str(int(time.time()))
        if self._last_timestamp == current_timestamp:
            self._timestamp_counter += 1
        else:
            self._last_timestamp = current_timestamp
            self._timestamp_counter = 1
        return f"{current_timestamp}_{self._timestamp_counter}"

    def _save_detail_payload(self, trace_id, payload):
        filename = f"{trace_id}.json"
        filepath = os.path.join(self.detail_log_dir, filename)
        try:
            if self.file_output:
                with open(filepath, "w", encoding="utf-8") as f:
                    json.dump(payload, f, ensure_ascii=False, indent=2)
            return filename
        except Exception as e:
            return f"Error saving detail: {str(e)}"

    def _should_log(self, level):
        level_priority = self.LEVEL_PRIORITY.get(level.upper(), 1)
        min_priority = self.LEVEL_PRIORITY.get(self.min_level.upper(), 0)
        return level_priority >= min_priority

    @classmethod
    def summarize(cls, value: Any) -> Any:
        """Make a parameter JSON-safe; tensors and arrays become shape/dtype/range dicts."""
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu()
            summary = {"shape": list(value.shape), "dtype": str(value.dtype).replace("torch.", "")}
            if value.numel() and value.is_floating_point():
                finite = value[torch.isfinite(value)]
                if finite.numel():
                    summary["min"] = float(finite.min())
                    summary["max"] = float(finite.max())
            elif value.numel() == 1:
                summary["value"] = value.item()
            return summary
        if isinstance(value, np.ndarray):
            return cls.summarize(torch.from_numpy(np.ascontiguousarray(value)))
        if isinstance(value, np.generic):
            return value.item()
        if isinstance(value, float) and not math.isfinite(value):
            return str(value)
        if isinstance(value, dict):
            return {str(k): cls.summarize(v) for k, v in value.items()}
        if isinstance(value, (list, tuple)):
            return [cls.summarize(v) for v in value]
        if isinstance(value, (str, int, float, bool)) or value is None:
            return value
        return str(value)

    def _log(self, level, message, category=None, params=None, max_inline_chars=200):
        if not self._should_log(level):
            return

        is_blacklisted = self._is_blacklisted(category)
        log_entry = {
            "timestamp": datetime.now().isoformat(),
            "level": level,
            "message": message,
        }
        if category:
            log_entry["category"] = category

        if params:
            params = self.summarize(params)
            params_str = json.dumps(params, ensure_ascii=False)
            if len(params_str) <= max_inline_chars or level.upper() in ("ERROR", "CRITICAL"):
                log_entry["params_summary"] = params
            else:
                trace_id = self._generate_unique_trace_id()
                detail_filename = self._save_detail_payload(trace_id, params)
                if detail_filename.startswith("Error"):
                    log_entry["detail_save_error"] = detail_filename
                else:
                    log_entry["has_detail_file"] = True
                    log_entry["detail_ref"] = detail_filename
                if isinstance(params, dict):
                    log_entry["params_summary"] = {"keys": list(params.keys())}
                else:
                    log_entry["params_summary"] = {"type": type(params).__name__, "length": len(params)}

        if self.file_output:
            target_log_path = self.blacklisted_log_path if is_blacklisted else self.main_log_path
            with self._lock:
                with open(target_log_path, "a", encoding="utf-8") as f:
                    f.write(json.dumps(log_entry, ensure_ascii=False) + "\n")

        if self.console_output and not is_blacklisted:
            category_str = f"[{category}]" if category else ""
            if level.upper() in ("ERROR", "CRITICAL"):
                print(
                    f"[{level}]{category_str} {message} {log_entry.get('params_summary', '')}",
                    file=sys.stderr,
                )
            else:
                print(f"[{level}]{category_str} {message}", file=sys.stderr)
