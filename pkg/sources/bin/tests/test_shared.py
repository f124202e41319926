import os
import tempfile
import unittest
from pathlib import Path
from unittest.mock import patch

import numpy as np
import shared
from model_core import DataFormatError


class TestToBuiltin(unittest.TestCase):

    def test_nested_numpy(self) -> None:
        data = {"a": np.array([[1.0, 2.0]]), "b": (np.int64(3), np.bool_(True)), 4: np.float32(0.5)}
        self.assertEqual(shared.to_builtin(data), {"a": [[1.0, 2.0]], "b": [3, True], "4": 0.5})
        self.assertIs(type(shared.to_builtin(np.int64(3))), int)

    def test_json_round_trip(self) -> None:
        with tempfile.TemporaryDirectory() as tmpdir:
            output_fp = os.path.join(tmpdir, "report.json")
            shared.export_to_json({"sigma": np.eye(2), "loglik": np.float64(-12.5)}, output_fp)
            self.assertEqual(shared.load_json(output_fp), {"sigma": [[1.0, 0.0], [0.0, 1.0]], "loglik": -12.5})


class TestLoadConfig(unittest.TestCase):

    def test_missing_file(self) -> None:
        self.assertEqual(shared.load_config(Path("does/not/exist.yml")), {})

    def test_bundled_config(self) -> None:
        conf_path = Path(__file__).resolve().parent.parent.parent.joinpath("data", "conf.yml")
        configs = shared.load_config(conf_path)
        self.assertEqual(configs["quadrature"]["nodes_per_dim"], 15)
        self.assertEqual(configs["threads"], 1)


class TestResolveThreads(unittest.TestCase):

    def test_flag_first(self) -> None:
        with patch.dict(os.environ, {shared.THREADS_ENV: "6"}):
            self.assertEqual(shared.resolve_threads(3, {"threads": 2}), 3)

    def test_environment_before_config(self) -> None:
        with patch.dict(os.environ, {shared.THREADS_ENV: "6"}):
            self.assertEqual(shared.resolve_threads(None, {"threads": 2}), 6)

    def test_config_then_default(self) -> None:
        with patch.dict(os.environ, {}, clear=True):
            self.assertEqual(shared.resolve_threads(None, {"threads": 2}), 2)
            self.assertEqual(shared.resolve_threads(None, {}), 1)
            self.assertEqual(shared.resolve_threads(0, {}), 1)

    def test_invalid_environment(self) -> None:
        with patch.dict(os.environ, {shared.THREADS_ENV: "many"}):
            with self.assertRaises(DataFormatError):
                shared.resolve_threads(None, {})

    def test_invalid_config(self) -> None:
        with patch.dict(os.environ, {}, clear=True):
            with self.assertRaises(DataFormatError):
                shared.resolve_threads(None, {"threads": "two"})


class TestSchemaHash(unittest.TestCase):

    def test_cluster_order_does_not_matter(self) -> None:
        roles = {"A": ["slope"], "B": ["temp"]}
        self.assertEqual(shared.schema_hash(roles, ["b", "a"]), shared.schema_hash(roles, ["a", "b"]))

    def test_roles_matter(self) -> None:
        self.assertNotEqual(
            shared.schema_hash({"A": ["temp"], "B": []}, ["a"]), shared.schema_hash({"A": [], "B": ["temp"]}, ["a"])
        )
        empty = {"A": [], "B": []}
        self.assertNotEqual(shared.schema_hash(empty, ["a"]), shared.schema_hash(empty, ["b"]))


if __name__ == "__main__":
    unittest.main()
