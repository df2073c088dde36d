"""Point-supervised pseudo-masks by heat diffusion and bi-level detector training."""
