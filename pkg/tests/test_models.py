import json

import numpy as np
import pytest

from ifl.models import (ContractError, FusionContract, ModelSpec, base_output_dim, build_model,
                        load_specs, param_count, table2_specs, validate_contract)
from ifl.nn import Conv2d, Dense, LayerSpec, MaxPool2d
from ifl.protocols import compose_predict


def dense_count(*dims):
    return sum(a * b + b for a, b in zip(dims, dims[1:]))


def conv_count(*chans):
    return sum(a * b * 9 + b for a, b in zip(chans, chans[1:]))


# hand-computed from the layer widths of the four client architectures
EXPECTED_COUNTS = {
    1: (conv_count(1, 16, 32, 48), dense_count(432, 256, 128, 64, 10)),
    2: (conv_count(1, 16, 32) + dense_count(1568, 432), dense_count(432, 128, 10)),
    3: (dense_count(784, 432), dense_count(432, 256, 128, 64, 10)),
    4: (dense_count(784, 1024, 512, 432), dense_count(432, 10)),
}


def shape_oracle(layers, shape):
    """Independent shape arithmetic: 3x3/pad-1 conv keeps H, W; 2x2 pool floors."""
    for spec in layers:
        if spec.kind == "conv2d":
            shape = (spec.args[1], shape[1], shape[2])
        elif spec.kind == "maxpool2d":
            shape = (shape[0], shape[1] // 2, shape[2] // 2)
        elif spec.kind == "flatten":
            shape = (int(np.prod(shape)),)
        elif spec.kind == "dense":
            shape = (spec.args[1],)
    return shape


def test_four_specs():
    specs = table2_specs()
    assert [s.client_id for s in specs] == [1, 2, 3, 4]


def test_client3_base_is_single_dense():
    dense = [l for l in table2_specs()[2].base_layers if l.kind == "dense"]
    assert dense == [LayerSpec("dense", (784, 432))]


def test_client4_modular_is_single_dense():
    assert table2_specs()[3].modular_layers == (LayerSpec("dense", (432, 10)),)


def test_fusion_dims_all_432():
    for spec in table2_specs():
        assert base_output_dim(spec) == 432
        assert spec.modular_layers[0] == LayerSpec("dense", (432, spec.modular_layers[0].args[1]))
        assert spec.modular_layers[-1].args[1] == 10


def test_shape_witnesses():
    c1, c2 = table2_specs()[:2]
    pre_fusion = [l for l in c2.base_layers][: [l.kind for l in c2.base_layers].index("dense")]
    assert shape_oracle(pre_fusion, (1, 28, 28)) == (1568,)
    assert shape_oracle(c1.base_layers, (1, 28, 28)) == (432,)


def test_fusion_layer_types_differ():
    kinds = []
    for spec in table2_specs():
        weighted = [l.kind for l in spec.base_layers if l.kind in ("conv2d", "dense")]
        kinds.append(weighted[-1])
    assert kinds == ["conv2d", "dense", "dense", "dense"]


def test_output_layers_have_no_relu():
    for spec in table2_specs():
        assert spec.modular_layers[-1].kind == "dense"
        # fusion output passes through ReLU (conv stage or FC activation)
        assert "relu" in [l.kind for l in spec.base_layers[-3:]]


@pytest.mark.parametrize("cid", [1, 2, 3, 4])
def test_param_counts(cid):
    spec = table2_specs()[cid - 1]
    base, modular = EXPECTED_COUNTS[cid]
    assert param_count(spec, "base") == base
    assert param_count(spec, "modular") == modular
    assert build_model(spec, np.random.default_rng(0)).param_count() == base + modular


def test_client3_base_count_by_hand():
    assert param_count(table2_specs()[2], "base") == 784 * 432 + 432


@pytest.mark.parametrize("cid", [1, 2, 3, 4])
def test_built_base_output(cid, rng):
    spec = table2_specs()[cid - 1]
    model = build_model(spec, rng)
    x = rng.random((32, 1, 28, 28), dtype=np.float32)
    z = model.base.forward(x)
    assert z.shape == (32,) + shape_oracle(spec.base_layers, (1, 28, 28)) == (32, 432)
    assert model.forward(x).shape == (32, 10)


def test_build_deterministic():
    spec = table2_specs()[0]
    a = build_model(spec, np.random.default_rng(11))
    b = build_model(spec, np.random.default_rng(11))
    for p, q in zip(a.base.params() + a.modular.params(), b.base.params() + b.modular.params()):
        assert p.tobytes() == q.tobytes()


def test_contract_rejects_433(rng):
    with pytest.raises(ContractError, match="client 1"):
        build_model(table2_specs()[0], rng, FusionContract(fusion_dim=433))


def test_validate_contract():
    specs = table2_specs()
    assert validate_contract(specs, FusionContract()) == []
    assert validate_contract([], FusionContract()) == []
    c3 = specs[2]
    altered = ModelSpec(3, (LayerSpec("flatten"), LayerSpec("dense", (784, 400)), LayerSpec("relu")),
                        c3.modular_layers)
    assert validate_contract([specs[0], specs[1], altered, specs[3]], FusionContract()) == [(3, 400)]


def test_validate_contract_checks_modular_input():
    c4 = table2_specs()[3]
    bad = ModelSpec(4, c4.base_layers, (LayerSpec("dense", (400, 10)),))
    assert validate_contract([bad], FusionContract()) == [(4, 400)]


def test_all_pairs_compose(rng):
    models = [build_model(s, rng) for s in table2_specs()]
    x = rng.random((5, 1, 28, 28), dtype=np.float32)
    for base in models:
        for modular in models:
            pred = compose_predict(base.base, modular.modular, x)
            assert pred.shape == (5,) and pred.min() >= 0 and pred.max() < 10


def test_spec_json_round_trip(tmp_path):
    specs, contract = load_specs()
    path = tmp_path / "specs.json"
    path.write_text(json.dumps({"fusion_dim": 432, "clients": [s.to_dict() for s in specs]}))
    again, c2 = load_specs(path)
    assert again == specs and c2.fusion_dim == contract.fusion_dim


def test_built_layers_match_spec(rng):
    model = build_model(table2_specs()[0], rng)
    convs = [l for l in model.base.layers if isinstance(l, Conv2d)]
    assert [(c.in_channels, c.out_channels, c.kernel, c.stride, c.padding) for c in convs] == \
        [(1, 16, 3, 1, 1), (16, 32, 3, 1, 1), (32, 48, 3, 1, 1)]
    assert sum(isinstance(l, MaxPool2d) for l in model.base.layers) == 3
    assert all(isinstance(l, Dense) for l in model.modular.layers[::2])
