"""Plain-SVG overlays for visual inspection of detections.

Only primitive shapes (rect, line, circle) are emitted, so files render
anywhere and stay byte-deterministic. The image itself is not embedded;
the overlay shows the patch frame, ground-truth crosses, per-line
candidate crosses, and final detection circles.
"""


def _f(v):
    return f"{v:.2f}"


def _cross(x, y, r, color, width):
    return (f'<line x1="{_f(x - r)}" y1="{_f(y)}" x2="{_f(x + r)}" y2="{_f(y)}" '
            f'stroke="{color}" stroke-width="{width}"/>'
            f'<line x1="{_f(x)}" y1="{_f(y - r)}" x2="{_f(x)}" y2="{_f(y + r)}" '
            f'stroke="{color}" stroke-width="{width}"/>')


def render_overlay(shape, truths, candidates, detections):
    """SVG text for one patch.

    truths: (x, y) ground-truth points; candidates: per-line candidate
    points; detections: final detected points.
    """
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{shape.w}" height="{shape.h}" '
        f'viewBox="0 0 {shape.w} {shape.h}">',
        f'<rect x="0" y="0" width="{shape.w}" height="{shape.h}" '
        f'fill="white" stroke="black" stroke-width="1"/>',
    ]
    for c in candidates:
        x, y = c.position if hasattr(c, "position") else c
        parts.append(_cross(x, y, 2.0, "green", 0.6))
    for t in truths:
        x, y = t
        parts.append(_cross(x, y, 6.0, "goldenrod", 1.2))
    for d in detections:
        x, y = d.position if hasattr(d, "position") else d
        parts.append(f'<circle cx="{_f(x)}" cy="{_f(y)}" r="4.0" fill="none" '
                     f'stroke="red" stroke-width="1.2"/>')
        parts.append(_cross(x, y, 4.0, "red", 1.0))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
