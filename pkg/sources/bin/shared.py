#!/usr/bin/env python

import hashlib
import json
import os
from pathlib import Path
from typing import (
    Any,
    Dict,
    List,
    Optional,
    Sequence,
)

import numpy as np
import pandas as pd
import yaml
from model_core import DataFormatError

THREADS_ENV = "EVTMEM_THREADS"


def to_builtin(data: Any) -> Any:
    """
    Convert numpy containers and scalars nested in data to JSON-serializable builtins
    """
    if isinstance(data, dict):
        return {str(k): to_builtin(v) for k, v in data.items()}
    if isinstance(data, (list, tuple)):
        return [to_builtin(v) for v in data]
    if isinstance(data, np.ndarray):
        return to_builtin(data.tolist())
    if isinstance(data, np.bool_):
        return bool(data)
    if isinstance(data, np.integer):
        return int(data)
    if isinstance(data, np.floating):
        return float(data)
    return data


def export_to_json(data: Dict, output_fp: str) -> None:
    """
    Export to a JSON file
    """
    with Path(output_fp).open("w") as f:
        json.dump(to_builtin(data), f, indent=4, sort_keys=True)


def load_json(input_fp: str) -> Dict:
    """
    Read a JSON file
    """
    with Path(input_fp).open("r") as t:
        content = json.load(t)
    return content


def export_to_csv(df: pd.DataFrame, output_fp: str) -> None:
    """
    Export a table to a comma separated file, creating the parent folder when needed
    """
    Path(output_fp).parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(output_fp, index=False)


def load_config(conf_fp: Path) -> Dict:
    """
    Read the YAML configuration, an empty mapping when the file does not exist

    :param conf_fp: path to the configuration file
    """
    if not conf_fp.is_file():
        return {}
    with conf_fp.open("r") as f:
        configs = yaml.safe_load(f)
    return configs or {}


def resolve_threads(flag: Optional[int], configs: Dict) -> int:
    """
    Worker count: the command-line flag, then the EVTMEM_THREADS variable, then the config, then 1

    :param flag: value of --threads
    :param configs: global configuration
    """
    if flag is not None:
        return max(1, flag)
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise DataFormatError(f"{THREADS_ENV} must be an integer, got {env}") from None
    try:
        return max(1, int(configs.get("threads", 1)))
    except (TypeError, ValueError):
        raise DataFormatError(f"threads must be an integer, got {configs.get('threads')}") from None


def schema_hash(roles: Dict[str, List[str]], cluster_ids: Sequence[str]) -> str:
    """
    Fingerprint of a table layout: its column roles and its set of clusters

    :param roles: column names per role
    :param cluster_ids: cluster ids of the table
    """
    payload = json.dumps({"roles": roles, "clusters": sorted(cluster_ids)}, sort_keys=True)
    return hashlib.sha256(payload.encode("utf-8")).hexdigest()
