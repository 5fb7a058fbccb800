"""Preview-enabled pitch control for a scaled wind turbine.

Modules: ``model`` (truth plant), ``sysid`` (linearization and
identification), ``inflow`` (wind sequences and preview), ``qp`` (active-set
solver), ``control`` (PI, LQR, preview LQR, MPC), ``sim`` (closed-loop
harness), ``hil`` (socket-separated plant and controller), ``cli``.
"""
__version__ = "0.1.0"
