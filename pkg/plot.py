"""Figures: the DER voltages and reactive powers of a run, the voltage profile of the feeder."""
import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402


def der_labels(feeder):
    return [der.name or f"DER {index}" for index, der in enumerate(feeder.ders)]


def plot_run(log, path, title=None):
    """Write the figure of the log as a PNG file."""
    scenario = log.scenario
    feeder = scenario.feeder
    minutes = log.times / 60
    labels = der_labels(feeder)
    figure, (voltages, powers) = plt.subplots(2, 1, sharex=True, figsize=(8, 6))
    for label, v in zip(labels, log.der_voltages.T):
        voltages.plot(minutes, v, label=label)
    for limit in scenario.v_limits:
        voltages.axhline(limit, color="grey", linestyle="--", linewidth=1)
    voltages.set_ylabel("voltage [p.u.]")
    voltages.legend(loc="best")
    voltages.grid(True)
    for label, q in zip(labels, feeder.base.pu_to_kw(log.setpoints).T):
        powers.step(minutes, q, where="post", label=label)
    powers.set_ylabel("reactive power [kVAr]")
    powers.set_xlabel("time [min]")
    powers.grid(True)
    if log.activation_time is not None:
        for axes in (voltages, powers):
            axes.axvline(log.activation_time / 60, color="black", linewidth=1)
    figure.suptitle(title or scenario.name)
    figure.tight_layout()
    figure.savefig(path, dpi=100)
    plt.close(figure)
    return path


def plot_profile(feeder, op, path, v_limits=None, title=None):
    """Write |v| against the bus as a PNG file, the DER buses marked."""
    magnitudes = abs(op.v)
    buses = range(len(magnitudes))
    figure, axes = plt.subplots(figsize=(6, 4))
    axes.plot(buses, magnitudes, marker="o", color="black")
    for bus, label in zip(feeder.der_buses, der_labels(feeder)):
        axes.annotate(label, (bus, magnitudes[bus]), textcoords="offset points", xytext=(0, 6), ha="center")
    for limit in v_limits or ():
        axes.axhline(limit, color="grey", linestyle="--", linewidth=1)
    axes.set_xticks(list(buses))
    axes.set_xticklabels([bus.name or str(bus.id) for bus in feeder.buses])
    axes.set_xlabel("bus")
    axes.set_ylabel("voltage [p.u.]")
    axes.grid(True)
    axes.set_title(title or "voltage profile")
    figure.tight_layout()
    figure.savefig(path, dpi=100)
    plt.close(figure)
    return path
