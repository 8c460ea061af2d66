# Named pretraining presets. Keys are ContrastConfig field names.
CONTRAST_PRESETS = {
    'moco-v1': {'variant': 'moco', 'tau': 0.07},
    'exemplar-v1': {'variant': 'exemplar', 'tau': 0.07},
    'moco-v2': {'variant': 'moco', 'tau': 0.2},
    'exemplar-v2': {'variant': 'exemplar', 'tau': 0.1},
    'supervised': {'variant': 'cross_entropy'},
    }

# (variant, queue capacity, tau) rows of the temperature / queue-size ablation.
# Queue sizes are desk-scale stand-ins for 65536 and 1M.
ABLATION_GRID = [
    ('moco', 1024, 0.07),
    ('moco', 4096, 0.07),
    ('exemplar', 4096, 0.07),
    ('exemplar', 4096, 0.1),
    ('moco', 1024, 0.2),
    ('moco', 4096, 0.1),
    ('moco', 4096, 0.2),
    ('exemplar', 4096, 0.2),
    ]

CONTRAST_DEFAULTS = {
    'tau': 0.07,
    'queue_capacity': 4096,
    'momentum': 0.999,
    'epochs': 30,
    'batch_size': 64,
    'lr': 0.03,
    'sgd_momentum': 0.9,
    'weight_decay': 1e-4,
    'cosine': True,
    'embedding_dim': 128,
    'backbone_channels': (16, 32, 64, 128),
    }

# Reference numbers quoted alongside desk-scale results; never used as expectations.
FULL_SCALE_REFERENCE = {
    'moco-v1': 60.8,
    'exemplar-v1': 64.6,
    'moco-v2': 67.5,
    'exemplar-v2': 68.9,
    }
