"""Regenerate the coarse benchmark geometry files in src/alefsi/geodata/.

The coarse meshes are hand-designed so that uniform refinement reproduces
the per-level dof budgets of the benchmark configurations while resolving
the fluid-solid interface with cell facets on every level.  Run from the
repository root:

    python scripts/gen_geometry.py
"""

import math
from pathlib import Path

OUT = Path(__file__).resolve().parent.parent / "src" / "alefsi" / "geodata"


def fmt(x):
    return repr(float(x))


def write_geo(path, dim, vertices, cells, facets, curves, comment):
    lines = [f"# {comment}", "# written by scripts/gen_geometry.py", "format 1", f"dim {dim}"]
    lines.append(f"vertices {len(vertices)}")
    for v in vertices:
        lines.append(" ".join(fmt(c) for c in v))
    lines.append(f"cells {len(cells)}")
    for sub, conn in cells:
        lines.append(sub + " " + " ".join(str(i) for i in conn))
    lines.append(f"facets {len(facets)}")
    for label, conn in facets:
        lines.append(label + " " + " ".join(str(i) for i in conn))
    lines.append(f"curves {len(curves)}")
    for label, kind, params in curves:
        lines.append(f"{label} {kind} " + " ".join(fmt(p) for p in params))
    path.write_text("\n".join(lines) + "\n")
    print(f"wrote {path} ({len(vertices)} vertices, {len(cells)} cells)")


def channel_template(cx, ring_left, ring_right, wake_mid, wake_right, tail_xs):
    """Vertex/cell/facet lists for the channel cross-section.

    The cylinder sits at (cx, 0.2) with radius 0.05; the elastic flag spans
    [attach, ring_right] x [0.19, 0.21].  Five ring cells stretch from the
    cylinder to the channel walls, two anisotropic cells make up the flag,
    and a three-quad wedge merges the flag-tip intervals into the wake.
    """
    r = 0.05
    xa = cx + r * math.sqrt(1.0 - 0.2 ** 2)          # flag corners: circle at y = 0.2 +- 0.01
    ang = [math.radians(a) for a in (60.0, 144.0, 216.0, 300.0)]
    C1 = (xa, 0.21)
    C2 = (cx + r * math.cos(ang[0]), 0.2 + r * math.sin(ang[0]))
    C3 = (cx + r * math.cos(ang[1]), 0.2 + r * math.sin(ang[1]))
    C4 = (cx + r * math.cos(ang[2]), 0.2 + r * math.sin(ang[2]))
    C5 = (cx + r * math.cos(ang[3]), 0.2 + r * math.sin(ang[3]))
    C6 = (xa, 0.19)
    M = (cx + r, 0.2)

    T1, T2 = (ring_right, 0.41), (ring_left, 0.41)
    B2, B1 = (ring_left, 0.0), (ring_right, 0.0)
    A1, A, A5 = (ring_right, 0.21), (ring_right, 0.2), (ring_right, 0.19)
    P, Q, Qt = (wake_mid, 0.19), (wake_mid, 0.21), (wake_mid, 0.41)
    B0, B2w = (wake_right, 0.17), (wake_right, 0.23)
    Wb0, Wt = (wake_right, 0.0), (wake_right, 0.41)

    verts = [T2, B2, C1, C2, C3, C4, C5, C6, M, T1, B1, A1, A, A5,
             P, Q, Qt, B0, B2w, Wb0, Wt]
    names = {v: i for i, v in enumerate(verts)}

    def n(*vs):
        return [names[v] for v in vs]

    cells = [
        ("fluid", n(C1, A1, T1, C2)),
        ("fluid", n(C2, T1, T2, C3)),
        ("fluid", n(C3, T2, B2, C4)),
        ("fluid", n(C4, B2, B1, C5)),
        ("fluid", n(C5, B1, A5, C6)),
        ("solid", n(C6, A5, A, M)),
        ("solid", n(M, A, A1, C1)),
        ("fluid", n(A5, B0, P, A)),
        ("fluid", n(A, P, Q, A1)),
        ("fluid", n(B0, B2w, Q, P)),
        ("fluid", n(B1, Wb0, B0, A5)),
        ("fluid", n(A1, Q, Qt, T1)),
        ("fluid", n(Q, B2w, Wt, Qt)),
    ]
    facets = [
        ("wall", n(T1, T2)), ("wall", n(B2, B1)),
        ("wall", n(B1, Wb0)), ("wall", n(Qt, T1)), ("wall", n(Wt, Qt)),
        ("cylinder", n(C2, C1)), ("cylinder", n(C3, C2)), ("cylinder", n(C4, C3)),
        ("cylinder", n(C5, C4)), ("cylinder", n(C6, C5)),
        ("solid_dirichlet", n(M, C6)), ("solid_dirichlet", n(C1, M)),
    ]

    # wake tail columns with the fixed interval stack [0, .17, .23, .41]
    prev = [names[Wb0], names[B0], names[B2w], names[Wt]]
    for j, x in enumerate(tail_xs):
        new = []
        for y in (0.0, 0.17, 0.23, 0.41):
            names[(x, y)] = len(verts)
            verts.append((x, y))
            new.append(names[(x, y)])
        for k in range(3):
            cells.append(("fluid", [prev[k], new[k], new[k + 1], prev[k + 1]]))
        facets.append(("wall", [prev[0], new[0]]))
        facets.append(("wall", [new[3], prev[3]]))
        if j == len(tail_xs) - 1:
            for k in range(3):
                facets.append(("outflow", [new[k], new[k + 1]]))
        prev = new
    return verts, cells, facets, names, (T2, B2)


def gen_2d():
    verts, cells, facets, names, (T2, B2) = channel_template(
        cx=0.2, ring_left=0.0, ring_right=0.6, wake_mid=0.85, wake_right=1.1,
        tail_xs=[2.5])
    facets.append(("inflow", [names[T2], names[B2]]))
    curves = [("cylinder", "circle", (0.2, 0.2, 0.05)),
              ("solid_dirichlet", "circle", (0.2, 0.2, 0.05))]
    write_geo(OUT / "fsi3_2d.txt", 2, verts, cells, facets, curves,
              "fsi-3 channel: cylinder (0.2,0.2) r=0.05, flag 0.35 x 0.02, tip vertex (0.6,0.2)")


def gen_3d():
    verts2, cells2, facets2, names2, (T2, B2) = channel_template(
        cx=0.5, ring_left=0.2, ring_right=0.9, wake_mid=1.2, wake_right=1.5,
        tail_xs=[1.95, 2.4, 2.8])
    # inflow column ahead of the ring block
    for v in ((0.0, 0.0), (0.0, 0.41)):
        names2[v] = len(verts2)
        verts2.append(v)
    ib, it = names2[(0.0, 0.0)], names2[(0.0, 0.41)]
    cells2.append(("fluid", [ib, names2[B2], names2[T2], it]))
    facets2.append(("inflow", [it, ib]))
    facets2.append(("wall", [ib, names2[B2]]))
    facets2.append(("wall", [names2[T2], it]))

    zs = [0.0, 0.1, 0.2, 0.3, 0.355, 0.41]
    beam_layers = {1, 2}                      # z in [0.1, 0.3]
    nv2 = len(verts2)
    verts3 = [(x, y, z) for z in zs for (x, y) in verts2]

    def vid(i2, layer):
        return layer * nv2 + i2

    cells3 = []
    for lay in range(len(zs) - 1):
        for sub, conn in cells2:
            sub3 = sub if (sub == "fluid" or lay in beam_layers) else "fluid"
            lo = [vid(i, lay) for i in conn]
            hi = [vid(i, lay + 1) for i in conn]
            cells3.append((sub3, lo + hi))

    facets3 = []
    for lay in range(len(zs) - 1):
        for label, (a, b) in facets2:
            if label == "solid_dirichlet" and lay not in beam_layers:
                label = "cylinder"            # arc faces wet the fluid outside the beam span
            facets3.append((label, [vid(a, lay), vid(b, lay),
                                    vid(b, lay + 1), vid(a, lay + 1)]))
    for sub, conn in cells2:                  # z = 0 and z = 0.41 walls
        facets3.append(("wall", [vid(i, 0) for i in conn]))
        facets3.append(("wall", [vid(i, len(zs) - 1) for i in conn]))

    curves = [("cylinder", "cylinder_z", (0.5, 0.2, 0.05)),
              ("solid_dirichlet", "cylinder_z", (0.5, 0.2, 0.05))]
    write_geo(OUT / "fsi_3d.txt", 3, verts3, cells3, facets3, curves,
              "3d channel: cylinder axis (0.5,0.2) r=0.05, beam to x=0.9, z in [0.1,0.3]")


if __name__ == "__main__":
    OUT.mkdir(parents=True, exist_ok=True)
    gen_2d()
    gen_3d()
