import numpy as np
import pytest

from oceanfuse.config import ModelConfig, PartitionConfig
from oceanfuse.errors import DegenerateInputError, SchemaError
from oceanfuse.services.assim_model import (
    AssimModel,
    LatentFeature,
    assimilate,
    encode_source,
    fuse,
    load_model,
    save_model,
)
from oceanfuse.services.geo import VARIABLES, encode_coords, interpolate_field
from oceanfuse.services.ndcore import init_mlp
from oceanfuse.services.partition import extract_patch, partition_domain
from oceanfuse.tests.conftest import identity_norm, tiny_model_config

COARSE_FRIENDLY = PartitionConfig(patch_lat=24, patch_lon=40, overlap_lat=8, overlap_lon=16)


def _model(schemas, seed=0, live_decoder=True):
    rng = np.random.default_rng(seed)
    model = AssimModel.build(list(schemas.values()), tiny_model_config(), identity_norm(schemas), rng,
                             dtype=np.float64)
    if live_decoder:
        last = model.decoder.weights[-1]
        last[:] = rng.standard_normal(last.shape) * 0.3
    return model


@pytest.fixture
def patch(world):
    # 45-55N, 210-230E: open ocean with sea-ice coverage north of 50N
    return partition_domain(world.fine, (10, 20), (5, 5))[134]


@pytest.fixture
def patch_inputs(store, world, patch):
    lat, lon = world.fine.mesh()
    rows = (lat >= patch.lat0) & (lat < patch.lat1) & (lon >= patch.lon0) & (lon < patch.lon1) & world.fine_mask
    obs = {sid: o.clip(patch) for sid, o in store.observations(4).items()}
    return extract_patch(store.background(4), patch), obs, lat[rows], lon[rows]


def test_build_wires_widths(schemas):
    model = _model(schemas, live_decoder=False)
    d = tiny_model_config().latent_dim
    assert model.decoder.d_in == 4 + (len(schemas) + 1) * (d + 1)
    assert model.encoders['SSW'].d_in == 4 + 3
    assert model.background.d_in == 4 + len(VARIABLES)
    assert np.all(model.decoder.weights[-1] == 0)


def test_empty_source_gives_absent_latent(schemas):
    model = _model(schemas)
    latent = encode_source(model.encoders['SST'], np.zeros((0, 5)))
    assert latent.flag == 0
    assert np.all(latent.vector == 0)
    with pytest.raises(SchemaError):
        encode_source(model.encoders['SST'], np.zeros((3, 7)))


def test_fuse_layout():
    bg = LatentFeature(np.array([1.0, 2.0]), 1)
    fused = fuse(bg, [LatentFeature.absent(2, np.float64), LatentFeature(np.array([3.0, 4.0]), 1)], 2)
    np.testing.assert_array_equal(fused, [1, 2, 1, 0, 0, 0, 3, 4, 1])
    with pytest.raises(SchemaError):
        fuse(bg, [], 2)


def test_latent_is_permutation_and_duplication_invariant(schemas, patch_inputs, rng):
    model = _model(schemas)
    bg, obs, qlat, qlon = patch_inputs
    base = model.forward(model.context(bg, obs, qlat, qlon))

    shuffled = {sid: o.subset(rng.permutation(o.n)) for sid, o in obs.items()}
    np.testing.assert_allclose(model.forward(model.context(bg, shuffled, qlat, qlon)), base, atol=1e-12)

    doubled = {sid: o.subset(np.concatenate([np.arange(o.n), np.arange(o.n)])) for sid, o in obs.items()}
    np.testing.assert_allclose(model.forward(model.context(bg, doubled, qlat, qlon)), base, atol=1e-12)


def test_excluding_equals_missing_source(schemas, patch_inputs):
    model = _model(schemas)
    bg, obs, qlat, qlon = patch_inputs
    without = {sid: o for sid, o in obs.items() if sid != 'SIC'}
    a = model.forward(model.context(bg, obs, qlat, qlon), exclude={'SIC'})
    b = model.forward(model.context(bg, without, qlat, qlon))
    np.testing.assert_array_equal(a, b)
    c = model.forward(model.context(bg, obs, qlat, qlon))
    assert not np.allclose(a, c)


def test_queries_are_independent_points(schemas, patch_inputs):
    model = _model(schemas)
    bg, obs, qlat, qlon = patch_inputs
    full = model.forward(model.context(bg, obs, qlat, qlon))
    part = model.forward(model.context(bg, obs, qlat[:3], qlon[:3]))
    np.testing.assert_allclose(part, full[:3], atol=1e-12)


def test_loss_gradients_match_finite_differences(schemas, patch_inputs, rng):
    model = _model(schemas)
    bg, obs, qlat, qlon = patch_inputs
    ctx = model.context(bg, obs, qlat, qlon)
    target = rng.standard_normal((len(qlat), len(VARIABLES)))
    mask = np.ones(len(qlat), dtype=bool)
    mask[::4] = False
    loss, grads = model.loss_and_grads(ctx, target, mask)

    tensors = model.tensors()
    h = 1e-6
    for name in ('dec.W0', 'dec.b2', 'bg.W0', 'enc.SST.W1', 'enc.SSW.b0', 'enc.INSITU.W0'):
        flat = tensors[name].reshape(-1)
        for idx in rng.choice(flat.size, size=min(4, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            up = model.loss_and_grads(ctx, target, mask)[0]
            flat[idx] = orig - h
            down = model.loss_and_grads(ctx, target, mask)[0]
            flat[idx] = orig
            assert grads[name].reshape(-1)[idx] == pytest.approx((up - down) / (2 * h), rel=1e-4, abs=1e-8)
    assert set(grads) == set(tensors)


def test_excluded_source_gets_zero_gradient(schemas, patch_inputs, rng):
    model = _model(schemas)
    bg, obs, qlat, qlon = patch_inputs
    ctx = model.context(bg, obs, qlat, qlon)
    target = rng.standard_normal((len(qlat), len(VARIABLES)))
    _, grads = model.loss_and_grads(ctx, target, np.ones(len(qlat), dtype=bool), exclude={'SSS'})
    assert all(np.all(g == 0) for k, g in grads.items() if k.startswith('enc.SSS.'))
    assert any(np.any(g != 0) for k, g in grads.items() if k.startswith('enc.SIC.'))


def test_loss_needs_queries(schemas, patch_inputs):
    model = _model(schemas)
    bg, obs, _, _ = patch_inputs
    ctx = model.context(bg, obs, np.zeros(0), np.zeros(0))
    with pytest.raises(DegenerateInputError):
        model.loss_and_grads(ctx, np.zeros((0, 5)), np.zeros(0, dtype=bool))


@pytest.mark.parametrize('config', [
    tiny_model_config(),
    ModelConfig(latent_dim=4, hidden=8),
], ids=['shallow', 'default-depths'])
def test_zero_decoder_returns_interpolated_background(config, schemas, store, world):
    model = AssimModel.build(list(schemas.values()), config, identity_norm(schemas), np.random.default_rng(0),
                             dtype=np.float64)
    background = store.background(6)
    analysis = assimilate(model, background, store.observations(6), world.fine, world.fine_mask)
    expected = interpolate_field(background.select(VARIABLES), world.fine, world.fine_mask)
    np.testing.assert_array_equal(analysis.values[world.fine_mask], expected.values[world.fine_mask])
    assert np.isnan(analysis.values[~world.fine_mask]).all()
    assert analysis.day == 6


def test_same_model_serves_any_target_grid(schemas, store, world):
    model = _model(schemas)
    n_params = model.param_count()
    obs = store.observations(6)
    fine = assimilate(model, store.background(6), obs, world.fine, world.fine_mask, COARSE_FRIENDLY)
    coarse = assimilate(model, store.background(6), obs, world.coarse, world.coarse_mask, COARSE_FRIENDLY)
    assert fine.spec == world.fine and coarse.spec == world.coarse
    assert np.isfinite(coarse.values[world.coarse_mask]).all()
    assert model.param_count() == n_params
    # the default 10 x 20 degree patches snap onto the coarse cells
    default = assimilate(model, store.background(6), obs, world.coarse, world.coarse_mask)
    assert np.isfinite(default.values[world.coarse_mask]).all()


def test_parallel_patches_match_sequential(schemas, store, world):
    model = _model(schemas)
    obs = store.observations(6)
    a = assimilate(model, store.background(6), obs, world.fine, world.fine_mask, n_jobs=1)
    b = assimilate(model, store.background(6), obs, world.fine, world.fine_mask, n_jobs=3)
    np.testing.assert_array_equal(a.values, b.values)


def test_assimilate_validates_inputs(schemas, store, world):
    model = _model(schemas)
    with pytest.raises(SchemaError):
        assimilate(model, None, {}, world.fine, world.fine_mask)
    with pytest.raises(SchemaError):
        assimilate(model, store.background(6), {'RADAR': store.observations(6)['SST']}, world.fine,
                   world.fine_mask)


def test_checkpoint_roundtrip_reproduces_outputs(tmp_path, schemas, patch_inputs):
    model = _model(schemas)
    path = tmp_path / 'best.ckpt'
    save_model(path, model, 'c' * 64, {'epoch': 2})
    loaded, meta = load_model(path, schemas, 'c' * 64)
    assert meta['epoch'] == 2 and meta['sources'] == list(schemas)
    assert loaded.param_count() == model.param_count()
    bg, obs, qlat, qlon = patch_inputs
    np.testing.assert_allclose(loaded.forward(loaded.context(bg, obs, qlat, qlon)),
                               model.forward(model.context(bg, obs, qlat, qlon)), rtol=1e-4, atol=1e-5)


@pytest.mark.parametrize('meta', [
    {'decoder_depth': 8},
    {'encoder_depth': 6},
    {'activation': 'relu'},
])
def test_checkpoint_metadata_must_match_tensors(tmp_path, schemas, meta):
    path = tmp_path / 'best.ckpt'
    save_model(path, _model(schemas), 'c' * 64, meta)
    with pytest.raises(SchemaError):
        load_model(path, schemas)


def test_encoders_must_emit_the_latent_width(schemas):
    model = _model(schemas, live_decoder=False)
    bg = init_mlp([4 + len(VARIABLES), 8, 3], np.random.default_rng(0))
    with pytest.raises(SchemaError, match='latent dim'):
        AssimModel(model.schemas, model.latent_dim, model.encoders, bg, model.decoder, model.norm)


def test_model_rejects_miswired_decoder(schemas):
    model = _model(schemas, live_decoder=False)
    bad = init_mlp([10, 8, 5], np.random.default_rng(0))
    with pytest.raises(SchemaError):
        AssimModel(model.schemas, model.latent_dim, model.encoders, model.background, bad, model.norm)


def test_query_encoding_is_periodic(schemas, patch_inputs):
    model = _model(schemas)
    bg, obs, qlat, qlon = patch_inputs
    ctx = model.context(bg, obs, qlat[:2], qlon[:2])
    shifted = model.context(bg, obs, qlat[:2], qlon[:2] + 360.0)
    np.testing.assert_allclose(shifted.queries, ctx.queries, atol=1e-12)
    np.testing.assert_allclose(ctx.queries, encode_coords(qlat[:2], qlon[:2]))
