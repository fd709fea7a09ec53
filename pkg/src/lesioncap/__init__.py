"""Lesion-aware endoscopy captioning on a small numpy autodiff core.

Subpackages and modules:

* ``diffcore``: reverse-mode autodiff arrays, primitives, layers, gradient checks
* ``datamodel``: metadata schema, dataset layout, tokenizer, stratified split
* ``synthgen``: procedural colonoscopy-like images with lesion masks
* ``encoder``, ``lesionattn``, ``captioner``: the model
* ``trainer``, ``evalsuite``, ``cli``: training, metrics and the command line
"""
__version__ = "0.1.0"
