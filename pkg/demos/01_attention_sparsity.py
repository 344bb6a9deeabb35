# How sparse is attention over image tokens compared with text tokens?
import numpy as np

from kvevict import StreamConfig, cumulative_scores, generate_trace, modality_sparsity, modality_variance

trace = generate_trace(StreamConfig(seed=42))
m = trace.prefill(0)
print("prefill matrix", m.shape, "(ragged, causal)")

for thr in (1e-5, 1e-4, 1e-3):
    s = modality_sparsity(m, thr)
    print(f"threshold {thr:g}: overall {s.overall:.3f}  visual {s.visual:.3f}  text {s.text:.3f}")

# cumulative scores: total attention each token has received so far
scores = cumulative_scores(m)
var_v, var_t = modality_variance(scores, trace.modalities)
print("variance of cumulative scores: visual", round(var_v, 4), "text", round(var_t, 4))

visual = np.array([x.value == "visual" for x in trace.modalities])
top = np.argsort(scores[visual])[::-1][:5]
print("heaviest visual columns:", top, scores[visual][top].round(3))
