"""What the multi-scale windows do to the attention maps.

A 4x4 "image" where only the top-left pixel matches word 0 and every other
pixel leans to word 1. With a 1x1 window only that pixel attends to word 0.
A wider window sums the queries of a neighbourhood, so each pixel votes with
its neighbours: at 3x3 the pixels next to the match still favour word 0, at
5x5 the surrounding pixels outvote it everywhere. Setting the mixture to
[1, 0, 0] gives plain single-pixel cross attention back.
"""
import torch

from dmmi.mba import MBA, baseline_cross_attention

torch.manual_seed(0)
torch.set_default_dtype(torch.float64)
m = MBA(vis_dim=2, text_dim=2, attn_dim=2)
with torch.no_grad():
    for lin in (m.q_img, m.k_txt):
        lin.weight.copy_(torch.eye(2) * 3)
        lin.bias.zero_()

v = torch.zeros(1, 2, 4, 4)
v[0, 0, 0, 0] = 1.0          # one pixel carries feature 0
v[0, 1] = 0.2                # everything else leans to feature 1
v[0, 1, 0, 0] = 0.0
e = torch.tensor([[[1.0, 0.0], [0.0, 1.0]]])   # word 0 ~ feature 0, word 1 ~ feature 1
valid = torch.ones(1, 2, dtype=torch.bool)

with torch.no_grad():
    per_scale = m.image_weights(v, e, valid, per_scale=True)
for r, w in zip(m.region_sizes, per_scale):
    print(f"window {r}x{r}: weight on word 0 per pixel")
    print(w[0, :, 0].view(4, 4).numpy().round(3))

with torch.no_grad():
    m.lambda_img.copy_(torch.tensor([1.0, 0.0, 0.0]))
    m.gamma_v.fill_(1.0)
    fused, _ = m(v, e, valid)
    base = baseline_cross_attention(v, e, valid, m.q_img, m.k_txt, m.v_txt)
print("lambda=[1,0,0] vs single-pixel attention, max diff:", (fused - v - base).abs().max().item())
