from marshmallow import Schema, fields, post_load, validate

from . import channel_types, pde_kinds
from .types import ManifestEntry, TrajectoryMeta

DATASET_FORMAT = 'pdet-dataset'
CHECKPOINT_FORMAT = 'pdet-checkpoint'
CONTAINER_VERSION = 1
CONTAINER_DTYPES = ('float32', 'float64', 'int64')


class TrajectoryMetaSchema(Schema):
    pde_kind = fields.String(required=True, validate=validate.OneOf(pde_kinds.ALL))
    params = fields.Dict(keys=fields.String(), values=fields.Float(), load_default=dict)
    domain_extent = fields.List(fields.Float(validate=validate.Range(min=0, min_inclusive=False)),
                                required=True, validate=validate.Length(equal=2))
    periodic = fields.List(fields.Boolean(), required=True, validate=validate.Length(equal=2))
    seed = fields.Integer(required=True)
    dt = fields.Float(required=True, validate=validate.Range(min=0, min_inclusive=False))
    t0 = fields.Float(required=True)
    long_rollout = fields.Boolean(load_default=False)

    @post_load
    def make_meta(self, data, **kwargs):
        data['domain_extent'] = tuple(data['domain_extent'])
        data['periodic'] = tuple(data['periodic'])
        return TrajectoryMeta(**data)


class TrajectoryEntrySchema(Schema):
    shape = fields.List(fields.Integer(validate=validate.Range(min=1)), required=True,
                        validate=validate.Length(equal=4))
    dtype = fields.String(required=True, validate=validate.Equal('float32'))
    offset = fields.Integer(required=True, validate=validate.Range(min=0))
    nbytes = fields.Integer(required=True, validate=validate.Range(min=0))
    field_types = fields.List(fields.String(validate=validate.OneOf(channel_types.ALL)), required=True)
    meta = fields.Nested(TrajectoryMetaSchema, required=True)


class DatasetManifestSchema(Schema):
    format = fields.String(required=True, validate=validate.Equal(DATASET_FORMAT))
    version = fields.Integer(required=True, validate=validate.Equal(CONTAINER_VERSION))
    byte_order = fields.String(required=True, validate=validate.Equal('little'))
    trajectories = fields.List(fields.Nested(TrajectoryEntrySchema), required=True)


class ContainerEntrySchema(Schema):
    name = fields.String(required=True)
    dtype = fields.String(required=True, validate=validate.OneOf(CONTAINER_DTYPES))
    shape = fields.List(fields.Integer(validate=validate.Range(min=1)), required=True)
    offset = fields.Integer(required=True, validate=validate.Range(min=0))
    nbytes = fields.Integer(required=True, validate=validate.Range(min=0))

    @post_load
    def make_entry(self, data, **kwargs):
        return ManifestEntry(data['name'], data['dtype'], tuple(data['shape']), data['offset'], data['nbytes'])


class CheckpointManifestSchema(Schema):
    format = fields.String(required=True, validate=validate.Equal(CHECKPOINT_FORMAT))
    version = fields.Integer(required=True, validate=validate.Equal(CONTAINER_VERSION))
    byte_order = fields.String(required=True, validate=validate.Equal('little'))
    entries = fields.List(fields.Nested(ContainerEntrySchema), required=True)
    meta = fields.Dict(keys=fields.String(), load_default=dict)
