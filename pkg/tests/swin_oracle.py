"""Naive windowed attention that groups tokens explicitly, without the cyclic-shift trick."""

import math

import torch

from swintempo.swin import SwinBlock, effective_window


def naive_window_attention(block: SwinBlock, xn: torch.Tensor) -> torch.Tensor:
    """Attention branch of ``block`` on a normalized ``[1, H, W, C]`` grid.

    With a shift ``s`` the window grid is displaced so groups along each axis
    are ``[0, s), [s, s + ws), ...``; group id is ``(i - s) // ws``. Every
    token attends exactly to the tokens of its own group.
    """
    attn = block.attn
    _, H, W, C = xn.shape
    ws, s = effective_window(H, W, block.window_size, block.shifted)
    nh = attn.num_heads
    hd = C // nh
    w = attn.window_size
    table = attn.relative_position_bias_table
    qkv = xn[0] @ attn.qkv.weight.T + attn.qkv.bias  # [H, W, 3C]
    q, k, v = qkv[..., :C], qkv[..., C : 2 * C], qkv[..., 2 * C :]

    groups = {}
    for y in range(H):
        for x in range(W):
            groups.setdefault(((y - s) // ws, (x - s) // ws), []).append((y, x))

    out = torch.zeros(H, W, C, dtype=xn.dtype)
    for members in groups.values():
        for yq, xq in members:
            heads = []
            for h in range(nh):
                sl = slice(h * hd, (h + 1) * hd)
                logits = []
                for yk, xk in members:
                    dot = (q[yq, xq, sl] * k[yk, xk, sl]).sum() / math.sqrt(hd)
                    bias = table[(yq - yk + w - 1) * (2 * w - 1) + (xq - xk + w - 1), h]
                    logits.append(dot + bias)
                weights = torch.softmax(torch.stack(logits), dim=0)
                vals = torch.stack([v[yk, xk, sl] for yk, xk in members])
                heads.append((weights[:, None] * vals).sum(0))
            out[yq, xq] = torch.cat(heads) @ attn.proj.weight.T + attn.proj.bias
    return out[None]


def naive_block(block: SwinBlock, x: torch.Tensor) -> torch.Tensor:
    x = x + naive_window_attention(block, block.norm1(x))
    return x + block.mlp(block.norm2(x))
