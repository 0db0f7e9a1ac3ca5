import numpy as np
import pytest

from dnad.controller import ControllerConfig
from dnad.data import gen_synthetic
from dnad.distillation import (
    CompatibilityError, TeacherBundle, TeacherFormatError, TeacherNet, check_compatible, collect_feature_maps,
    load_teacher, partition_blocks, save_teacher, train_teacher,
)
from dnad.driver import Mode, Search, SearchConfig
from dnad.objectives import KDConfig, at_loss
from dnad.search_space import NetConfig, build_supernet
from dnad.tensor import Tape, Tensor
from dnad.training import RetrainConfig


@pytest.fixture(scope="module")
def small_data():
    return gen_synthetic(classes=4, per_class=30, size=16, seed=3)


@pytest.fixture(scope="module")
def teacher(small_data):
    return train_teacher(small_data, RetrainConfig(epochs=3, batch_size=16, cutout=0, drop_path=0.0, seed=0),
                         width=8)


def supernet(cells=8, seed=0):
    return build_supernet(NetConfig(cells=cells, nodes=4, channels=4, input_shape=(3, 16, 16), classes=4),
                          seed=seed)


def test_student_partition_cuts_and_resolutions():
    part = partition_blocks(supernet())
    assert part.cuts == (1, 4, 7) and part.resolutions == (16, 8, 4) and part.blocks == 3
    one = partition_blocks(supernet(), blocks=1)
    assert one.cuts == (7,) and one.resolutions == (4,)
    with pytest.raises(ValueError):
        partition_blocks(supernet(), blocks=4)
    with pytest.raises(TypeError):
        partition_blocks(object())


def test_teacher_partition_matches_student():
    t = TeacherNet((3, 16, 16), 4, width=4)
    part = partition_blocks(t)
    assert part.resolutions == (16, 8, 4)
    check_compatible(partition_blocks(supernet()), part)


def test_incompatible_resolution_names_block():
    bad = partition_blocks(TeacherNet((3, 16, 16), 4, width=4, strides=(1, 2, 4)))
    assert bad.resolutions == (16, 8, 2)
    with pytest.raises(CompatibilityError, match="block 3") as info:
        check_compatible(partition_blocks(supernet()), bad)
    assert info.value.block == 3


@pytest.mark.parametrize("blocks", [1, 2, 3])
def test_block_composition_equals_monolithic(f64, rng, blocks):
    net = supernet()
    x = rng.normal(size=(3, 3, 16, 16))
    maps, logits = collect_feature_maps(net, partition_blocks(net, blocks), x)
    whole = net(Tensor(x))
    assert np.abs(logits.data - whole.data).max() < 1e-9
    assert [m.shape[-1] for m in maps] == [16, 8, 4][-blocks:]


def test_teacher_composition_and_detachment(f64, rng):
    t = TeacherNet((3, 16, 16), 4, width=4, seed=1)
    t.freeze()
    x = rng.normal(size=(2, 3, 16, 16))
    part = partition_blocks(t)
    maps, logits = collect_feature_maps(t, part, x)
    assert np.abs(logits.data - t(Tensor(x)).data).max() < 1e-9
    assert all(not m.requires_grad for m in maps)
    again, _ = collect_feature_maps(t, part, x)
    for a, b in zip(maps, again):
        np.testing.assert_array_equal(a.data, b.data)


def test_at_gradient_reaches_student_alpha_and_weights(f64, rng):
    net = supernet()
    t = TeacherNet((3, 16, 16), 4, width=4, seed=1)
    t.freeze()
    x = rng.normal(size=(2, 3, 16, 16))
    t_maps, _ = collect_feature_maps(t, partition_blocks(t), x)
    with Tape() as tape:
        maps, _ = collect_feature_maps(net, partition_blocks(net), x)
        loss = at_loss(maps, t_maps)
    grads = tape.backward(loss)
    for p in t.parameters(include_frozen=True):
        assert p not in grads and p.grad is None
    assert any(np.abs(grads.get(a, 0)).sum() > 0 for a in net.arch_parameters())
    assert any(np.abs(grads.get(w, 0)).sum() > 0 for w in net.weight_parameters())


def test_teacher_beats_chance_and_records_accuracy(teacher, small_data):
    assert teacher.accuracy > 1.0 / small_data.classes
    assert teacher.meta["epochs"] == 3
    assert all(not p.requires_grad for p in teacher.net.parameters(include_frozen=True))


def test_save_load_roundtrip(teacher, tmp_path, small_data):
    path = tmp_path / "t.bin"
    save_teacher(teacher, path)
    back = load_teacher(path)
    a = dict(teacher.net.named_parameters(include_frozen=True))
    b = dict(back.net.named_parameters(include_frozen=True))
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].data.dtype == b[k].data.dtype
        assert a[k].data.tobytes() == b[k].data.tobytes()
    assert back.accuracy == teacher.accuracy and back.blocks == teacher.blocks and back.meta == teacher.meta
    assert back.checksum() == teacher.checksum()
    x = small_data.split("val")[0][:8]
    np.testing.assert_allclose(back.net(Tensor(x)).data, teacher.net(Tensor(x)).data, atol=1e-6)


def test_load_rejects_bad_magic(teacher, tmp_path):
    path = tmp_path / "t.bin"
    save_teacher(teacher, path)
    raw = bytearray(path.read_bytes())
    raw[0:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(TeacherFormatError, match="magic"):
        load_teacher(path)


@pytest.mark.parametrize("keep", [6, 10, 40, -1])
def test_load_rejects_truncation(teacher, tmp_path, keep):
    path = tmp_path / "t.bin"
    save_teacher(teacher, path)
    raw = path.read_bytes()
    path.write_bytes(raw[:keep] if keep > 0 else raw[:-3])
    with pytest.raises(TeacherFormatError):
        load_teacher(path)


def test_load_rejects_version(teacher, tmp_path):
    path = tmp_path / "t.bin"
    save_teacher(teacher, path)
    raw = path.read_bytes().replace(b'"format_version": 1', b'"format_version": 9', 1)
    path.write_bytes(raw)
    with pytest.raises(TeacherFormatError, match="format_version"):
        load_teacher(path)


def test_two_seeds_give_different_teachers(small_data):
    cfg = dict(epochs=1, batch_size=32, cutout=0, drop_path=0.0)
    a = train_teacher(small_data, RetrainConfig(seed=0, **cfg), width=4)
    b = train_teacher(small_data, RetrainConfig(seed=1, **cfg), width=4)
    assert a.checksum() != b.checksum()
    assert 0 <= a.accuracy <= 1 and 0 <= b.accuracy <= 1


def test_teacher_weights_untouched_by_search(teacher, small_data):
    before = teacher.checksum()
    cfg = SearchConfig(mode=Mode.DNAD, kd=KDConfig(variant="st+at"),
                       net=NetConfig(cells=8, nodes=4, channels=4), batch_size=16, warmup_epochs=1,
                       max_steps=12, controller=ControllerConfig(ls_min=0.0))
    search = Search(small_data, cfg, teacher)
    search.run()
    assert search.step == 12
    assert teacher.checksum() == before


def test_bundle_feature_maps_use_partition(teacher, small_data):
    x = small_data.split("train")[0][:2]
    maps, logits = teacher.feature_maps(x)
    assert [m.shape[-1] for m in maps] == [16, 8, 4]
    assert logits.shape == (2, small_data.classes)
    assert isinstance(teacher, TeacherBundle)
