"""A few optimisation steps with both descent methods on a coarse channel.

The energy ratio ``J/J0`` and the obstacle edge-length ratio are printed
side by side.  The same runs are available from the command line, e.g.::

    python -m winfshape run --config my.ini --out runs/winf
    python -m winfshape report runs/winf runs/plap
"""
from winfshape.mesh import generate_channel_mesh
from winfshape.optimizer import RunConfig, optimize

steps = 6
mesh = generate_channel_mesh((-7, 7, -3, 3), (-0.5, 0.5, -0.5, 0.5), 32)

runs = {}
for method in ("winf", "plap"):
    _, hist = optimize(mesh, RunConfig(method=method, steps=steps, output=f"demo_{method}"))
    runs[method] = hist

print(f"{'step':>4s} | {'winf J/J0':>9s} {'edges':>6s} | {'plap J/J0':>9s} {'edges':>6s}")
for k in range(steps + 1):
    w, p = runs["winf"].rows[k], runs["plap"].rows[k]
    print(f"{k:4d} | {w['J_ratio']:9.4f} {w['edge_length_ratio']:6.2f} | "
          f"{p['J_ratio']:9.4f} {p['edge_length_ratio']:6.2f}")
print("histories written to demo_winf/ and demo_plap/")
