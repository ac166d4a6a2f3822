import numpy as np
import pytest

from errors import MissingModel, WeightFormatError
from model_store import MAGIC, HeadRegistry, load_weights, save_weights, sidecar_path


def test_weights_round_trip_bit_identical(tmp_path):
    rng = np.random.default_rng(0)
    params = {"1.weight": rng.normal(size=(3, 2, 3, 3)), "0.bias": rng.normal(size=4), "scalar": np.array(2.5)}
    path = save_weights(tmp_path / "w.pntw", params, {"seed": 7, "note": "héllo"})

    loaded, metadata = load_weights(path)
    assert set(loaded) == set(params)
    for name, array in params.items():
        assert loaded[name].shape == array.shape
        assert loaded[name].tobytes() == array.tobytes()
    assert metadata == {"seed": 7, "note": "héllo"}
    assert path.read_bytes()[:4] == MAGIC


def test_container_bytes_are_deterministic(tmp_path):
    params = {"b": np.arange(3.0), "a": np.ones((2, 2))}
    first = save_weights(tmp_path / "one.pntw", params).read_bytes()
    second = save_weights(tmp_path / "two.pntw", dict(reversed(list(params.items())))).read_bytes()
    assert first == second


def test_missing_sidecar_gives_empty_metadata(tmp_path):
    path = save_weights(tmp_path / "w.pntw", {"x": np.zeros(2)})
    sidecar_path(path).unlink()
    assert load_weights(path)[1] == {}


def test_missing_file(tmp_path):
    with pytest.raises(MissingModel):
        load_weights(tmp_path / "absent.pntw")


@pytest.mark.parametrize("corrupt", [
    lambda data: b"NOPE" + data[4:],
    lambda data: data[:4] + b"\x09\x00" + data[6:],
    lambda data: data[:-8],
    lambda data: data[:5],
])
def test_corrupt_containers(tmp_path, corrupt):
    path = save_weights(tmp_path / "w.pntw", {"x": np.arange(4.0)})
    path.write_bytes(corrupt(path.read_bytes()))
    with pytest.raises(WeightFormatError):
        load_weights(path)


def test_registry_lookup_and_fallback(tmp_path):
    registry = HeadRegistry(tmp_path / "heads.json")
    registry.register("lunch", tmp_path / "head_lunch.pntw")
    registry.register("lunch", tmp_path / "head_lunch_pureed.pntw", texture="pureed")

    assert registry.lookup("lunch", "pureed") == tmp_path / "head_lunch_pureed.pntw"
    assert registry.lookup("lunch", "minced") == tmp_path / "head_lunch.pntw"
    assert registry.lookup("lunch") == tmp_path / "head_lunch.pntw"
    assert registry.lookup("dinner") is None

    reopened = HeadRegistry(tmp_path / "heads.json")
    assert reopened.meals() == ["lunch"]
    assert reopened.lookup("lunch", "pureed") == tmp_path / "head_lunch_pureed.pntw"
