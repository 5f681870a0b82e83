"""Smoke test for the Python bindings.

Build first:  pip install --no-build-isolation -e crates/py
Then run:     python3 python/smoke_test.py
"""

import os
import tempfile

import synares


def check_joins():
    x = [0.0, 0.0, 1.0, 1.0]
    y = [0.0, 1.0, 0.0, 1.0]
    assert synares.join(x, y, "OR") == [0.0, 1.0, 1.0, 1.0]
    assert synares.join(x, y, "AND") == [0.0, 0.0, 0.0, 1.0]
    assert synares.join(x, y, "IAND") == [0.0, 1.0, 0.0, 0.0]
    assert synares.join(x, y, "ADD") == [0.0, 1.0, 1.0, 2.0]
    try:
        synares.join([0.5], [1.0], "OR")
    except synares.SynaresError as e:
        assert "NonBinary" in str(e) or "binary" in str(e), e
    else:
        raise AssertionError("non-binary OR input accepted")


def check_lif():
    spikes, hidden = synares.lif_trace([1.5, 0.5, 2.0])
    assert spikes == [0.0, 0.0, 1.0], spikes
    assert abs(hidden[0] - 0.75) < 1e-12 and abs(hidden[1] - 0.625) < 1e-12
    assert hidden[2] == 0.0


def check_network():
    net = synares.Network("c8k3s1p1-BN-LIF-(OR-SEW Block(c8))-AP-FC4", (1, 8, 8), 2, join="OR", seed=3)
    assert net.classes == 4 and net.timesteps == 2
    images = [((i * 7) % 11) / 10.0 for i in range(2 * 64)]
    logits, spikes, rates = net.infer(images, 2)
    assert len(logits) == 8 and spikes >= 0 and rates

    audit = net.audit(images, 2)
    macs = [name for name, klass, _ in audit if klass == "MAC"]
    assert macs == [audit[0][0]], audit

    total_pj, mac_flops, ac_ops = net.energy(images, 2)
    assert total_pj > 0 and mac_flops > 0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "net.bin")
        net.save(path)
        again = synares.Network.load(path)
        assert again.infer(images, 2)[0] == logits

    block, neuron = net.shortcut_neurons()[0]
    net.remove_shortcut(block)
    assert net.pruned_blocks() == [block]
    assert net.shortcut_neurons() == []


def check_pruning_and_data():
    rates = [{"block0.short.lif": r} for r in (0.2, 0.0, 0.0, 0.0, 0.0, 0.0)]
    assert synares.detect_natural_pruning(rates, ["block0.short.lif"], 5) == [("block0.short.lif", 1)]
    frames, shape, labels = synares.synth_events("moving-bar", 4, 6, 8, 8, seed=1)
    assert shape == [4, 6, 2, 8, 8] and len(frames) == 4 * 6 * 2 * 64 and len(labels) == 4
    assert synares.conv_flops(4, 4, 3, 2, 8) == 4 * 4 * 9 * 2 * 8
    assert synares.fc_flops(16, 10) == 160


if __name__ == "__main__":
    check_joins()
    check_lif()
    check_network()
    check_pruning_and_data()
    print("python smoke test ok")
