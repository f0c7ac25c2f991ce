"""Identify a three-tank process with a certified model.

The data come from the nonlinear tank simulator with a piecewise-constant
pump voltage.  Training uses truncated backpropagation; after every epoch
the gain certificates of all layers are re-checked.  A short run already
lowers the validation error, though not monotonically with one sequence per
update; the longer run is in the acceptance tests.
"""

import numpy as np

from l2ru.model import init_l2ru_params
from l2ru.threetank import generate_dataset
from l2ru.training import TrainConfig, train

data = generate_dataset(seed=0, n_sequences=30)
params = init_l2ru_params("psi", 1, 3, 8, 2, np.random.default_rng(0), gamma_hat=5.0, alpha=7.0)
config = TrainConfig(epochs=40, learning_rate=1e-3, truncation_length=1400, batch_size=1,
                     output_headroom=8.0)

trained, report = train(params, data, config)
for row in report.rows[::10]:
    print(f"epoch {row['epoch']:3d}  train {row['train_loss']:.4g}  val {row['val_loss']:.4g}  "
          f"nrmse {np.round(row['nrmse'], 3).tolist()}  certified {row['cert_ok']}")
