"""Generate the shipped ResNet shape lists in netspec format.

usage: python3 scripts/gen_netspecs.py data/netspecs
"""
import sys
from pathlib import Path


def resnet56():
    layers = [("conv1", 3, 3, 16, 1, 1, 32)]
    cin, hw = 16, 32
    for stage, width in enumerate((16, 32, 64)):
        for b in range(9):
            stride = 2 if (b == 0 and stage > 0) else 1
            layers.append((f"s{stage + 1}b{b}a", 3, cin, width, stride, 1, hw))
            hw = (hw + 2 - 3) // stride + 1
            layers.append((f"s{stage + 1}b{b}b", 3, width, width, 1, 1, hw))
            cin = width
    layers.append(("fc", 1, 64, 10, 1, 0, 1))
    return layers


def resnet50():
    layers = [("conv1", 7, 3, 64, 2, 3, 224)]
    cin, hw = 64, 56
    for stage, (mid, out, blocks) in enumerate(((64, 256, 3), (128, 512, 4), (256, 1024, 6), (512, 2048, 3))):
        for b in range(blocks):
            stride = 2 if (b == 0 and stage > 0) else 1
            name = f"s{stage + 1}b{b}"
            layers.append((name + "a", 1, cin, mid, 1, 0, hw))
            layers.append((name + "b", 3, mid, mid, stride, 1, hw))
            out_hw = (hw + 2 - 3) // stride + 1
            layers.append((name + "c", 1, mid, out, 1, 0, out_hw))
            if b == 0:
                layers.append((name + "proj", 1, cin, out, stride, 0, hw))
            cin, hw = out, out_hw
    layers.append(("fc", 1, 2048, 1000, 1, 0, 1))
    return layers


def emit(name, layers, convert):
    lines = [f"network {name}"]
    for (lname, d, c, n, stride, pad, hw) in layers:
        variant, s, chat, g = convert(lname, d, c, n)
        lines.append(
            f"layer {lname} d={d} c={c} n={n} variant={variant} s={s} "
            f"chat={chat} g={g} stride={stride} pad={pad} hw={hw}"
        )
    return "\n".join(lines) + "\n"


def keep_ends(inner):
    def convert(lname, d, c, n):
        if lname in ("conv1", "fc"):
            return ("standard", 1, c, 1)
        return inner(lname, d, c, n)
    return convert


def main():
    out = Path(sys.argv[1])
    out.mkdir(parents=True, exist_ok=True)
    std = lambda lname, d, c, n: ("standard", 1, c, 1)

    r56 = resnet56()
    parts = [
        "# ResNet-56 on 32x32 inputs; option-A (parameter-free) shortcuts.\n"
        "# First and last layers stay standard in every variant.\n",
        emit("baseline", r56, std),
        emit("s-versatile", r56, keep_ends(lambda l, d, c, n: ("spatial", (d + 1) // 2, c, 1))),
        emit("c-versatile-8-8", r56, keep_ends(
            lambda l, d, c, n: ("channel", 1, c - 8, 8) if c >= 16 else ("standard", 1, c, 1))),
        emit("shared-l-versatile-s2", r56, keep_ends(lambda l, d, c, n: ("shared", 2, c, 1))),
        emit("separate-l-versatile-s2", r56, keep_ends(lambda l, d, c, n: ("separate", 2, c, 1))),
        emit("separate-l-versatile-s4", r56, keep_ends(lambda l, d, c, n: ("separate", 4, c, 1))),
    ]
    (out / "resnet56.netspec").write_text("\n".join(parts))

    r50 = resnet50()

    def learn(strategy, s):
        def convert(lname, d, c, n):
            if lname == "fc":
                return ("standard", 1, c, 1)
            return (strategy, s, c, 1)
        return convert

    parts = [
        "# ResNet-50 (stride on the 3x3 conv) on 224x224 inputs with projection shortcuts.\n"
        "# Learnable variants convert every convolution; the classifier stays standard.\n",
        emit("baseline", r50, std),
        emit("shared-l-versatile-s4", r50, learn("shared", 4)),
        emit("separate-l-versatile-s4", r50, learn("separate", 4)),
        emit("separate-l-versatile-s32", r50, learn("separate", 32)),
    ]
    (out / "resnet50.netspec").write_text("\n".join(parts))


if __name__ == "__main__":
    main()
