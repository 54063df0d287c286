"""Set-encoder / coordinate-decoder assimilation model.

Each observation source and the background have their own point encoder;
point embeddings are mean-pooled into a latent with a presence flag, the
latents are concatenated in source order and the decoder maps
(query coordinate, fused latent) to a normalized analysis increment.
"""
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Collection, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from joblib import Parallel, delayed

from ..config import ModelConfig, PartitionConfig
from ..errors import DegenerateInputError, SchemaError
from .data_pipeline import NormStats
from .geo import LAND, VARIABLES, GridField, GridSpec, encode_coords, interpolate_field
from .ndcore import MlpGrads, MlpParams, init_mlp, masked_mse, masked_mse_grad, mlp_forward, mlp_gradients
from .observations import ObservationSet, SourceSchema
from .partition import PatchSpec, extract_patch, partition_domain, patch_cells, stitch
from .storage import read_checkpoint, write_checkpoint

logger = logging.getLogger(__name__)

COORD_DIM = 4


@dataclass
class LatentFeature:
    vector: np.ndarray
    flag: int

    @classmethod
    def absent(cls, d: int, dtype=np.float32) -> 'LatentFeature':
        return cls(np.zeros(d, dtype=dtype), 0)


def encode_source(encoder: MlpParams, points: np.ndarray) -> LatentFeature:
    """Per-point embedding, mean-pooled; no points gives the absent latent"""
    points = np.asarray(points)
    if points.ndim != 2 or points.shape[1] != encoder.d_in:
        raise SchemaError(f'encoder expects points of width {encoder.d_in}, got shape {points.shape}')
    if points.shape[0] == 0:
        return LatentFeature.absent(encoder.d_out, encoder.dtype)
    return LatentFeature(mlp_forward(encoder, points).mean(axis=0), 1)


def background_points(background_patch: GridField, norm: NormStats) -> np.ndarray:
    """Ocean cells flattened to (encoded coord ++ normalized variables) rows"""
    lat, lon = background_patch.spec.mesh()
    mask = background_patch.ocean_mask
    if not mask.any():
        return np.zeros((0, COORD_DIM + len(background_patch.variables)))
    values = norm.normalize_background(background_patch.values[mask])
    return np.concatenate([encode_coords(lat[mask], lon[mask]), values], axis=1)


def encode_background(encoder: MlpParams, background_patch: GridField, norm: NormStats) -> LatentFeature:
    return encode_source(encoder, background_points(background_patch, norm))


def observation_points(obs: ObservationSet, norm: NormStats) -> np.ndarray:
    schema = obs.schema
    if obs.n == 0:
        return np.zeros((0, COORD_DIM + schema.encoded_width))
    values = schema.encode_values(norm.normalize_obs(schema.source_id, obs.values))
    return np.concatenate([encode_coords(obs.lats, obs.lons), values], axis=1)


def fuse(background: LatentFeature, sources: Sequence[LatentFeature], n_sources: Optional[int] = None) -> np.ndarray:
    """(vector ++ flag) for the background, then each source in schema order"""
    if n_sources is not None and len(sources) != n_sources:
        raise SchemaError(f'expected {n_sources} source latents, got {len(sources)}')
    d = background.vector.shape[0]
    blocks = []
    for latent in [background, *sources]:
        if latent.vector.shape != (d,):
            raise SchemaError(f'latent width {latent.vector.shape} differs from background width {d}')
        blocks.append(np.append(latent.vector, latent.flag).astype(background.vector.dtype))
    return np.concatenate(blocks)


def decode(decoder: MlpParams, queries: np.ndarray, fused: np.ndarray) -> np.ndarray:
    """Normalized increments (n, N_A) at encoded query coordinates"""
    queries = np.atleast_2d(queries)
    if queries.shape[1] != COORD_DIM or COORD_DIM + fused.shape[0] != decoder.d_in:
        raise SchemaError(f'decoder expects {decoder.d_in} inputs, got {queries.shape[1]} + {fused.shape[0]}')
    return mlp_forward(decoder, _decoder_inputs(queries, fused))


def _decoder_inputs(queries: np.ndarray, fused: np.ndarray) -> np.ndarray:
    return np.concatenate([queries, np.broadcast_to(fused, (queries.shape[0], fused.shape[0]))], axis=1)


@dataclass
class PatchContext:
    """Encoder-ready inputs for one patch"""
    background: np.ndarray
    sources: Dict[str, np.ndarray]
    queries: np.ndarray


@dataclass
class AssimModel:
    schemas: List[SourceSchema]
    latent_dim: int
    encoders: Dict[str, MlpParams]
    background: MlpParams
    decoder: MlpParams
    norm: NormStats
    variables: Tuple[str, ...] = VARIABLES

    def __post_init__(self):
        ids = self.source_ids
        if len(set(ids)) != len(ids) or set(ids) != set(self.encoders):
            raise SchemaError('one encoder per source schema expected')
        expected = COORD_DIM + (len(ids) + 1) * (self.latent_dim + 1)
        if self.decoder.d_in != expected:
            raise SchemaError(f'decoder input width {self.decoder.d_in} does not match '
                              f'{len(ids)} sources and latent dim {self.latent_dim} ({expected})')
        if self.decoder.d_out != len(self.variables) or self.background.d_in != COORD_DIM + len(self.variables):
            raise SchemaError('background and analysis variable counts must match')
        for s in self.schemas:
            if self.encoders[s.source_id].d_in != COORD_DIM + s.encoded_width:
                raise SchemaError(f'encoder {s.source_id} input width does not match its schema')
        widths = {sid: e.d_out for sid, e in self.encoders.items()}
        widths['background'] = self.background.d_out
        off = {k: w for k, w in widths.items() if w != self.latent_dim}
        if off:
            raise SchemaError(f'encoder output widths {off} differ from latent dim {self.latent_dim}')

    @property
    def source_ids(self) -> List[str]:
        return [s.source_id for s in self.schemas]

    @classmethod
    def build(cls, schemas: Sequence[SourceSchema], config: ModelConfig, norm: NormStats,
              rng: np.random.Generator, dtype=np.float32) -> 'AssimModel':
        d, hidden = config.latent_dim, config.hidden
        n_vars = len(VARIABLES)

        def dims(d_in: int, depth: int, d_out: int) -> List[int]:
            return [d_in] + [hidden] * (depth - 1) + [d_out]

        encoders = {s.source_id: init_mlp(dims(COORD_DIM + s.encoded_width, config.encoder_depth, d), rng, dtype=dtype)
                    for s in schemas}
        background = init_mlp(dims(COORD_DIM + n_vars, config.encoder_depth, d), rng, dtype=dtype)
        dec_in = COORD_DIM + (len(schemas) + 1) * (d + 1)
        decoder = init_mlp(dims(dec_in, config.decoder_depth, n_vars), rng, zero_last=True, dtype=dtype)
        return cls(list(schemas), d, encoders, background, decoder, norm)

    def param_count(self) -> int:
        return (sum(e.param_count() for e in self.encoders.values())
                + self.background.param_count() + self.decoder.param_count())

    def tensors(self) -> Dict[str, np.ndarray]:
        out = {}
        for sid in self.source_ids:
            out.update(self.encoders[sid].tensors(f'enc.{sid}'))
        out.update(self.background.tensors('bg'))
        out.update(self.decoder.tensors('dec'))
        return out

    def with_tensors(self, tensors: Mapping[str, np.ndarray]) -> 'AssimModel':
        tensors = dict(tensors)
        encoders = {sid: MlpParams.from_tensors(tensors, f'enc.{sid}') for sid in self.source_ids}
        return AssimModel(self.schemas, self.latent_dim, encoders, MlpParams.from_tensors(tensors, 'bg'),
                          MlpParams.from_tensors(tensors, 'dec'), self.norm, self.variables)

    def meta(self) -> Dict:
        return {
            'sources': self.source_ids,
            'latent_dim': self.latent_dim,
            'encoder_depth': self.background.depth,
            'decoder_depth': self.decoder.depth,
            'activation': self.decoder.activation,
            'variables': list(self.variables),
            'norm': self.norm.to_dict(),
        }

    # Patch-level forward and backward

    def context(self, background_patch: GridField, obs: Mapping[str, ObservationSet],
                query_lats: np.ndarray, query_lons: np.ndarray) -> PatchContext:
        sources = {}
        for s in self.schemas:
            o = obs.get(s.source_id)
            sources[s.source_id] = (observation_points(o, self.norm) if o is not None
                                    else np.zeros((0, COORD_DIM + s.encoded_width)))
        return PatchContext(background_points(background_patch, self.norm), sources,
                            encode_coords(query_lats, query_lons))

    def latents(self, ctx: PatchContext, exclude: Collection[str] = ()) -> Tuple[LatentFeature, List[LatentFeature]]:
        bg = encode_source(self.background, ctx.background)
        sources = []
        for sid in self.source_ids:
            if sid in exclude:
                sources.append(LatentFeature.absent(self.latent_dim, self.decoder.dtype))
            else:
                sources.append(encode_source(self.encoders[sid], ctx.sources[sid]))
        return bg, sources

    def forward(self, ctx: PatchContext, exclude: Collection[str] = ()) -> np.ndarray:
        bg, sources = self.latents(ctx, exclude)
        if ctx.queries.shape[0] == 0:
            return np.zeros((0, len(self.variables)), dtype=self.decoder.dtype)
        return decode(self.decoder, ctx.queries, fuse(bg, sources, len(self.schemas)))

    def loss_and_grads(self, ctx: PatchContext, target: np.ndarray, mask: np.ndarray,
                       exclude: Collection[str] = ()) -> Tuple[float, Dict[str, np.ndarray]]:
        """Masked MSE of normalized increments and its gradient for every tensor"""
        if ctx.queries.shape[0] == 0:
            raise DegenerateInputError('patch has no query cells')
        bg, sources = self.latents(ctx, exclude)
        fused = fuse(bg, sources, len(self.schemas))
        dec_in = _decoder_inputs(ctx.queries, fused)
        pred = mlp_forward(self.decoder, dec_in)
        loss = masked_mse(pred, target, mask)
        dec_grads, g_in = mlp_gradients(self.decoder, dec_in, masked_mse_grad(pred, target, mask))
        g_fused = g_in[:, COORD_DIM:].sum(axis=0)

        grads = dec_grads.tensors('dec')
        d = self.latent_dim
        blocks = [('bg', self.background, ctx.background, bg)]
        blocks += [(f'enc.{sid}', self.encoders[sid], ctx.sources[sid], lat)
                   for sid, lat in zip(self.source_ids, sources)]
        for b, (prefix, params, points, latent) in enumerate(blocks):
            g_vec = g_fused[b * (d + 1): b * (d + 1) + d]
            if latent.flag:
                n = points.shape[0]
                upstream = np.broadcast_to(g_vec / n, (n, d))
                enc_grads, _ = mlp_gradients(params, points, upstream)
            else:
                enc_grads = MlpGrads([np.zeros_like(w) for w in params.weights],
                                     [np.zeros_like(b_) for b_ in params.biases])
            grads.update(enc_grads.tensors(prefix))
        return loss, grads


def patch_queries(patch: PatchSpec, target: GridSpec, target_mask: np.ndarray):
    """Rows, cols and ocean selection of the target cells inside a patch"""
    rows, cols = patch_cells(patch, target)
    lat, lon = target.mesh()
    sel = np.ix_(rows, cols)
    ocean = target_mask[sel]
    return rows, cols, ocean, lat[sel][ocean], lon[sel][ocean]


def assimilate_patch(model: AssimModel, patch: PatchSpec, background: GridField,
                     obs: Mapping[str, ObservationSet], target: GridSpec, target_mask: np.ndarray,
                     exclude: Collection[str] = ()) -> np.ndarray:
    """Denormalized increments on the patch's target cells (land NaN), before stitching"""
    rows, cols, ocean, qlat, qlon = patch_queries(patch, target, target_mask)
    clipped = {sid: o.clip(patch) for sid, o in obs.items()}
    ctx = model.context(extract_patch(background, patch), clipped, qlat, qlon)
    out = np.full((len(rows), len(cols), len(model.variables)), LAND)
    out[ocean] = model.norm.denormalize_increment(model.forward(ctx, exclude))
    return out


def assimilate(model: AssimModel, background: Optional[GridField], obs: Mapping[str, ObservationSet],
               target: GridSpec, target_mask: np.ndarray, partition: Optional[PartitionConfig] = None,
               exclude: Collection[str] = (), n_jobs: int = 1) -> GridField:
    """Analysis on `target`: interpolated background plus stitched model increments"""
    if background is None:
        raise SchemaError('background field is mandatory context for assimilation')
    unknown = set(obs) - set(model.source_ids)
    if unknown:
        raise SchemaError(f'observations for sources the model does not know: {sorted(unknown)}')
    partition = partition or PartitionConfig()
    patches = partition_domain(target, (partition.patch_lat, partition.patch_lon),
                               (partition.overlap_lat, partition.overlap_lon))
    outputs = Parallel(n_jobs=n_jobs, backend='threading')(
        delayed(assimilate_patch)(model, p, background, obs, target, target_mask, exclude) for p in patches
    )
    increments = stitch(zip(patches, outputs), target, target_mask, model.variables, background.day)
    bg_interp = interpolate_field(background.select(model.variables), target, target_mask)
    values = bg_interp.values + increments.values
    values[~target_mask] = LAND
    return GridField(target, model.variables, values, target_mask.copy(), background.day)


def save_model(path: Path, model: AssimModel, config_hash: str, extra: Optional[Dict] = None) -> str:
    meta = model.meta()
    meta.update(extra or {})
    return write_checkpoint(path, model.tensors(), config_hash, meta)


def load_model(path: Path, schemas: Mapping[str, SourceSchema],
               expected_hash: Optional[str] = None) -> Tuple[AssimModel, Dict]:
    tensors, _, meta = read_checkpoint(path, expected_hash)
    try:
        ordered = [schemas[sid] for sid in meta['sources']]
    except KeyError as e:
        raise SchemaError(f'{path}: checkpoint source {e} has no schema') from None
    missing = [k for k in ('latent_dim', 'encoder_depth', 'decoder_depth', 'activation', 'norm') if k not in meta]
    if missing:
        raise SchemaError(f'{path}: checkpoint metadata lacks {missing}')
    encoders = {s.source_id: MlpParams.from_tensors(tensors, f'enc.{s.source_id}') for s in ordered}
    background = MlpParams.from_tensors(tensors, 'bg')
    decoder = MlpParams.from_tensors(tensors, 'dec')
    if meta['activation'] != decoder.activation:
        raise SchemaError(f"{path}: checkpoint activation '{meta['activation']}' is not supported")
    depths = {f'enc.{sid}': e.depth for sid, e in encoders.items()}
    depths['bg'] = background.depth
    off = {k: d for k, d in depths.items() if d != meta['encoder_depth']}
    if decoder.depth != meta['decoder_depth']:
        off['dec'] = decoder.depth
    if off:
        raise SchemaError(f'{path}: stored depths {off} disagree with metadata '
                          f"(encoder {meta['encoder_depth']}, decoder {meta['decoder_depth']})")
    model = AssimModel(ordered, meta['latent_dim'], encoders, background, decoder,
                       NormStats.from_dict(meta['norm']), tuple(meta.get('variables', VARIABLES)))
    return model, meta
