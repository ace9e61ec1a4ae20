"""Independent straight-line scalar implementations of every loss formula.

Deliberately written with plain Python loops and the math module so they
share nothing with the library's vectorized code paths; the tests compare
both routes on random instances.
"""

import math


def transform_point(matrix, point):
    return [
        matrix[r][0] * point[0] + matrix[r][1] * point[1] + matrix[r][2] * point[2] + matrix[r][3]
        for r in range(3)
    ]


def reprojection_value(rel_matrices, fx, fy, cx, cy, tracks):
    """Eq.: sum over tracks of sum_{i>=2} m_i * ||proj(P^{1->i} unproj(p_1, d_1)) - p_i||_1.

    ``tracks`` entries: dict with anchor (index into rel_matrices), points
    (list of (x, y)), weights, depth.
    """
    total = 0.0
    for track in tracks:
        p1 = track["points"][0]
        d1 = track["depth"]
        x1 = [(p1[0] - cx) / fx * d1, (p1[1] - cy) / fy * d1, d1]
        for i in range(1, len(track["points"])):
            point = x1
            for j in range(track["anchor"], track["anchor"] + i):
                point = transform_point(rel_matrices[j], point)
            u = fx * point[0] / point[2] + cx
            v = fy * point[1] / point[2] + cy
            total += track["weights"][i] * (
                abs(u - track["points"][i][0]) + abs(v - track["points"][i][1])
            )
    return total


def _invert_rigid(matrix):
    out = [[0.0] * 4 for _ in range(4)]
    for r in range(3):
        for c in range(3):
            out[r][c] = matrix[c][r]
    for r in range(3):
        out[r][3] = -sum(matrix[c][r] * matrix[c][3] for c in range(3))
    out[3][3] = 1.0
    return out


def _matmul4(a, b):
    return [[sum(a[r][k] * b[k][c] for k in range(4)) for c in range(4)] for r in range(4)]


def smoothness_value(rel_matrices):
    """Sum over consecutive pairs of ||rel[t]^-1 rel[t+1] - I||_{1,1}."""
    total = 0.0
    for t in range(len(rel_matrices) - 1):
        d = _matmul4(_invert_rigid(rel_matrices[t]), rel_matrices[t + 1])
        for r in range(4):
            for c in range(4):
                total += abs(d[r][c] - (1.0 if r == c else 0.0))
    return total


def flow_value(depth_i, omega_i, rel_matrix, fx, fy, cx, cy, flow):
    """Sum_p omega * ||proj(rel * unproj(p, D_i(p))) - (p + F(p))||_1 + log(1/omega)."""
    h = len(depth_i)
    w = len(depth_i[0])
    total = 0.0
    for row in range(h):
        for col in range(w):
            d = depth_i[row][col]
            x = [(col - cx) / fx * d, (row - cy) / fy * d, d]
            y = transform_point(rel_matrix, x)
            u = fx * y[0] / y[2] + cx
            v = fy * y[1] / y[2] + cy
            tx = col + flow[row][col][0]
            ty = row + flow[row][col][1]
            om = omega_i[row][col]
            total += om * (abs(u - tx) + abs(v - ty)) + math.log(1.0 / om)
    return total


def temporal_value(depth_i, depth_j, omega_i, rel_matrix, fx, fy, cx, cy, flow):
    """Sum_p omega * max(a/b, b/a) + log(1/omega) over in-bounds flow targets.

    a is the z-coordinate of the warped point, b the bilinear sample of the
    optimized depth of frame j at the flow target.
    """
    h = len(depth_i)
    w = len(depth_i[0])
    total = 0.0
    for row in range(h):
        for col in range(w):
            tx = col + flow[row][col][0]
            ty = row + flow[row][col][1]
            if not (0.0 <= tx <= w - 1.0 and 0.0 <= ty <= h - 1.0):
                continue
            d = depth_i[row][col]
            x = [(col - cx) / fx * d, (row - cy) / fy * d, d]
            a = transform_point(rel_matrix, x)[2]
            x0 = min(max(int(math.floor(tx)), 0), w - 2)
            y0 = min(max(int(math.floor(ty)), 0), h - 2)
            gx = tx - x0
            gy = ty - y0
            b = (
                depth_j[y0][x0] * (1 - gx) * (1 - gy)
                + depth_j[y0][x0 + 1] * gx * (1 - gy)
                + depth_j[y0 + 1][x0] * (1 - gx) * gy
                + depth_j[y0 + 1][x0 + 1] * gx * gy
            )
            om = omega_i[row][col]
            total += om * max(a / b, b / a) + math.log(1.0 / om)
    return total


def si_value(r):
    n = len(r) * len(r[0])
    sum_sq = sum(v * v for row in r for v in row)
    total = sum(v for row in r for v in row)
    return sum_sq / n - (total / n) ** 2


def _pool2(grid):
    h2 = len(grid) // 2
    w2 = len(grid[0]) // 2
    return [
        [
            0.25 * (grid[2 * r][2 * c] + grid[2 * r][2 * c + 1]
                    + grid[2 * r + 1][2 * c] + grid[2 * r + 1][2 * c + 1])
            for c in range(w2)
        ]
        for r in range(h2)
    ]


def grad_value(r, n_scales=4):
    n_full = len(r) * len(r[0])
    total = 0.0
    level = [list(row) for row in r]
    for s in range(n_scales):
        if s > 0:
            if min(len(level), len(level[0])) < 2:
                break
            level = _pool2(level)
        for row in range(len(level)):
            for col in range(len(level[0]) - 1):
                total += abs(level[row][col + 1] - level[row][col])
        for row in range(len(level) - 1):
            for col in range(len(level[0])):
                total += abs(level[row + 1][col] - level[row][col])
    return total / n_full


def _normal_at(depth, fx, fy, cx, cy, row, col):
    def point(rr, cc):
        d = depth[rr][cc]
        return [(cc - cx) / fx * d, (rr - cy) / fy * d, d]

    px1 = point(row, col + 1)
    px0 = point(row, col - 1)
    py1 = point(row + 1, col)
    py0 = point(row - 1, col)
    tx = [px1[k] - px0[k] for k in range(3)]
    ty = [py1[k] - py0[k] for k in range(3)]
    n = [
        tx[1] * ty[2] - tx[2] * ty[1],
        tx[2] * ty[0] - tx[0] * ty[2],
        tx[0] * ty[1] - tx[1] * ty[0],
    ]
    norm = math.sqrt(n[0] ** 2 + n[1] ** 2 + n[2] ** 2)
    if norm <= 1e-12:
        return None
    return [v / norm for v in n]


def normal_value(depth_hat, depth_prior, fx, fy, cx, cy):
    """Sum of 1 - n_hat . n_prior over interior pixels where both exist."""
    h = len(depth_hat)
    w = len(depth_hat[0])
    total = 0.0
    for row in range(1, h - 1):
        for col in range(1, w - 1):
            n_hat = _normal_at(depth_hat, fx, fy, cx, cy, row, col)
            n_prior = _normal_at(depth_prior, fx, fy, cx, cy, row, col)
            if n_hat is None or n_prior is None:
                continue
            total += 1.0 - sum(n_hat[k] * n_prior[k] for k in range(3))
    return total


def static_value(points):
    n = len(points)
    total = 0.0
    for i in range(n):
        for j in range(n):
            total += sum((points[i][k] - points[j][k]) ** 2 for k in range(3)) / n**2
    return total


def dynamic_value(points, rays, windows=(1, 3, 5)):
    n = len(points)
    total = 0.0
    for i in range(n):
        for delta in windows:
            if i - delta < 0 or i + delta >= n:
                continue
            accel = [
                points[i + delta][k] - 2.0 * points[i][k] + points[i - delta][k]
                for k in range(3)
            ]
            total += sum(accel[k] * rays[i][k] for k in range(3)) ** 2
    return total


def reg_value(offsets, points, centers, lambda_reg=0.1):
    total = 0.0
    for i in range(len(offsets)):
        length = math.sqrt(sum((points[i][k] - centers[i][k]) ** 2 for k in range(3)))
        total += (1.0 / (offsets[i] + length) - 1.0 / length) ** 2
    return lambda_reg * total
