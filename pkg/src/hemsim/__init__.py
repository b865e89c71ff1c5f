"""hemsim: household load forecasting with transfer learning plus battery dispatch MPC.

Subpackages/modules:
  core       - quarter-hour grid types, calendar covariates, MAE / pinball metrics
  datagen    - synthetic cohort generation, preprocessing, scaling, splits, CSV I/O
  forecaster - TFT-style quantile forecaster with from-scratch reverse-mode gradients
  simplex    - dense bounded-variable primal simplex LP solver
  mpc        - battery dispatch LP formulation, brute-force oracle, verifier
  simulator  - rolling-horizon closed-loop simulation and cohort evaluation
  cli        - command-line pipeline (gen-data / pretrain / finetune / simulate / report)
"""

__version__ = "0.1.0"
