"""Deep-learning enhancement of space imagery: degradation synthesis, a
residual-encoder UNet with ICNR pixel-shuffle upsampling, perceptual-loss
training and evaluation."""

__version__ = "0.1.0"
