"""ConvFormer: hybrid CNN / deformable-transformer segmentation on a small numpy autograd engine."""
