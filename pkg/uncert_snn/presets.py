# Default values for every configurable part of the engine.
# Precedence: these presets < TOML config file < command-line flags.

# Strategy names as accepted on the command line (underscored forms work too)
STRATEGY_CHOICES = [
    'uncert-prune',
    'uncert-merge',
    'random-prune',
    'low-uncert-prune',
    'random-merge',
    'none',
]

# "uncert" = mu + lambda * sigma; "last" ranks by U at the final timestep
SCORE_MODE_CHOICES = ['uncert', 'mean', 'std', 'last']

AV_COUNTING_CHOICES = ['structural', 'data']

# Model (desk-scale two-stage spiking transformer)
DEFAULT_MODEL_CONFIG = {
    'steps': 4,
    'tau': 0.5,
    'vth': 1.0,
    'stage_channels': [32, 64],
    'stage_blocks': [1, 2],
    'stage_downsample': [1, 1],
    'patch': 1,
    'init_rate': 0.15,
    'residual_scale': 0.4,
    'model_seed': 0,
    'av_counting': 'structural',
}

# Synthetic task
DEFAULT_SYNTHETIC_SPEC = {
    'grid': 8,
    'classes': 4,
    'signature_tokens': 4,
    'p_signal': 0.9,
    'p_background': 0.1,
    'channels': 2,
    'train_samples': 256,
    'test_samples': 128,
}

# Head fit
DEFAULT_RIDGE_CONFIG = {
    'l2': 1e-3,
}

# Sweep grid: keep ratio 1.0 anchors the reduced ratios
DEFAULT_SWEEP_CONFIG = {
    'strategies': ['uncert-prune', 'random-prune', 'low-uncert-prune', 'uncert-merge'],
    'keep_ratios': [1.0, 0.8, 0.6, 0.4, 0.2],
    'seeds': [0, 1, 2, 3, 4],
    'lambda': 0.9,
    'insert_block': '2.1',
    'score_mode': 'uncert',
    'workers': 1,
    'batch_size': 64,
}

# Single-run defaults
DEFAULT_RUN_CONFIG = {
    'strategy': 'none',
    'keep_ratio': 1.0,
    'seed': 0,
}

# Keep ratios of the SOP report
DEFAULT_SOP_RATIOS = [1.0, 0.8, 0.6, 0.4]

FIRING_RATE_BAND = (0.05, 0.5)
