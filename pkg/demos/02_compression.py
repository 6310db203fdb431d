"""How much INT8 storage of frozen columns saves as a model grows.

Reference shape: 10 features, hidden size 50, window 10.
"""
from macpnn.cpnn import CpnnModel
from macpnn.quantize import model_size_bytes

model = CpnnModel(input_size=10, hidden_size=50, window_size=10, batch_size=128)
prev = None
print("cols  float_B  stored_B  ratio  marginal")
for n in range(1, 11):
    if n > 1:
        model.add_column()
    r = model_size_bytes(model)
    marg = ""
    if prev is not None:
        marg = f"{(r.quantized_model_bytes - prev.quantized_model_bytes) / (r.float_model_bytes - prev.float_model_bytes):.3f}"
    print(f"{n:4d} {r.float_model_bytes:8d} {r.quantized_model_bytes:9d}  {r.compression_ratio:.3f}  {marg}")
    prev = r
