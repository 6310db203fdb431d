"""A single progressive model on a drifting SRW stream.

The model predicts every point from the last W points, trains once per
mini-batch, and grows a column at each (known) drift. Kappa is printed per
concept, followed by the size of the model as columns pile up.
"""
import numpy as np

from macpnn.cpnn import CpnnModel
from macpnn.metrics import prequential_curves
from macpnn.quantize import model_size_bytes
from macpnn.streams import BoundarySpec, ConceptSpec, Hyperparameters, ScenarioConfig, build_scenario

funcs = {
    "A": BoundarySpec("S1", 0.0, 1.0, 1.2, ">=0"),
    "B": BoundarySpec("S2", 0.5, -0.25, -2.2, "<0"),
    "C": BoundarySpec("S1", 1.0, -1.0, 0.8, ">=0"),
}
cfg = ScenarioConfig("srw", funcs, [[ConceptSpec(f, 5000) for f in "ABC"]], seed=5,
                     strict_layout=False, hyper=Hyperparameters())
stream = build_scenario(cfg).devices[0]
h = cfg.hyper
model = CpnnModel(2, h.hidden_size, h.window_size, h.batch_size, h.epochs, h.lr, seed=0)

preds = np.zeros(len(stream), dtype=int)
drifts = set(stream.drift_indices)
for i, (x, y) in enumerate(zip(stream.features, stream.labels)):
    if i in drifts:
        model.add_column()
        model.buffer.clear()
    _, preds[i] = model.predict(x)  # test first ...
    model.learn_one(x, y)  # ... then train

for c, curve in enumerate(prequential_curves(stream.labels, preds, stream.drift_indices)):
    print(f"concept {c} ({stream.functions[c]}): final kappa {curve.kappa[-1]:.3f}, "
          f"columns in use {c + 1}")

size = model_size_bytes(model)
print(f"\n{model.n_columns} columns: {size.quantized_model_bytes} bytes stored, "
      f"{size.float_model_bytes} if kept in float (ratio {size.compression_ratio:.2f})")
