"""Independent per-layer parameter arithmetic, used to cross-check the models.

Pure integer bookkeeping, no torch imports — every expected count is the sum
of kernel-volume * in * out + bias + (2 * out for the norm) terms written out
by hand. If this file and the torch modules ever disagree, one of them is
wrong about the architecture.
"""


def conv_params(k, cin, cout, dims, bias=True, norm=True):
    n = (k ** dims) * cin * cout + (cout if bias else 0)
    if norm:
        n += 2 * cout
    return n


def cell_params(c, pairs, mult, dims, in_ch=None):
    """Input projection + `pairs` (pointwise, spatial) layer pairs."""
    if in_ch is None:
        in_ch = c
    g = c // pairs
    wide = mult * c
    total = conv_params(1, in_ch, c, dims)  # input projection
    for k in range(pairs):
        total += conv_params(1, c + k * g, wide, dims)
        total += conv_params(3, wide, g, dims)
    return total


def dt_params(level_channels, level, dims):
    agg = sum(level_channels[: level + 1])
    return conv_params(2, agg, level_channels[level + 1], dims)


def ut_params(level_channels, level, dims):
    agg = sum(level_channels[level:])
    return conv_params(2, agg, level_channels[level - 1], dims)


def pf_params(c_in, c, dims):
    total = conv_params(1, c_in, c, dims)          # reduce to c
    total += 4 * conv_params(3, c, c // 4, dims)   # four scaled paths
    total += conv_params(1, 2 * c, c, dims)        # final projection
    return total


def pw_fuse_params(c_in, c, dims):
    return conv_params(1, c_in, c, dims)


def _vertical_width(ch, module_idx, level, L, use_dt, use_ut):
    is_encoder = module_idx % 2 == 0
    if is_encoder:
        if level == 0:
            return ch[0]  # stem or previous decoder top output
        return ch[level] if use_dt else ch[level - 1]
    if level == L - 1:
        return ch[L - 1]  # same-stage encoder bottom output
    return ch[level] if use_ut else ch[level + 1]


def model_params(L, S, base, dims, pairs, mult, in_ch=1, classes=1,
                 use_dt=True, use_ut=True, fusion="msf_pf"):
    """Total parameter count for a full network under any variant flags."""
    ch = [base * 2 ** i for i in range(L)]
    total = conv_params(3, in_ch, base, dims)  # stem
    for m in range(2 * S):
        is_encoder = m % 2 == 0
        for lev in range(L):
            vert = _vertical_width(ch, m, lev, L, use_dt, use_ut)
            lat = ch[lev] if m >= 1 else 0
            total += cell_params(ch[lev], pairs, mult, dims, in_ch=vert + lat)
        if is_encoder and use_dt:
            for lev in range(L - 1):
                total += dt_params(ch, lev, dims)
        if not is_encoder and use_ut:
            for lev in range(L - 1, 0, -1):
                total += ut_params(ch, lev, dims)
    if fusion in ("msf_pf", "msf_pw"):
        fuse = pf_params if fusion == "msf_pf" else pw_fuse_params
        for j in range(1, 2 * S):
            c_agg = j * sum(ch)
            for lev in range(L):
                total += fuse(c_agg, ch[lev], dims)
    if fusion == "msf_pf":
        total += pf_params(S * base, base, dims)
    else:
        total += pw_fuse_params(S * base, base, dims)
    total += conv_params(3, base, classes, dims, norm=False)
    return total
