"""Self-distillation with multi-crop and cut-mix views."""
