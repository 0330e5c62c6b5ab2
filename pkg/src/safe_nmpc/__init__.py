"""Safe navigation MPC: synthesis, online tracking/robust/output-feedback MPC, simulation and checks."""
