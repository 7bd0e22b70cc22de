"""Bundled topology documents for the evaluation clusters and common
cloud GPU instance types (two 8-GPU hosts each for the instance types)."""


def _doc(num_hosts: int, gpus_per_host: int, intra_kind: str, intra_gbps: float,
         inter_gbps: float, host_gpu_gbps: float, ssd_gpu_gbps: float) -> dict:
    return {
        "hosts": [
            {
                "id": h,
                "gpus": gpus_per_host,
                "host_gpu_gbps": host_gpu_gbps,
                "ssd_gpu_gbps": ssd_gpu_gbps,
            }
            for h in range(num_hosts)
        ],
        "intra": {"kind": intra_kind, "gbps": intra_gbps},
        "inter": {"gbps": inter_gbps},
    }


PRESETS: dict[str, dict] = {
    # evaluation clusters: A has NVLink, B is PCIe-only
    "cluster-A": _doc(4, 8, "nvlink", 1600.0, 100.0, 128.0, 10.0),
    "cluster-B": _doc(2, 8, "pcie", 256.0, 100.0, 128.0, 10.0),
    # vendor instance types (NVLink speed uses the cluster-A figure; the
    # PCIe-only type uses the cluster-B intra speed)
    "a2-ultragpu-8g": _doc(2, 8, "nvlink", 1600.0, 12.5, 128.0, 2.58),
    "p4d.24xlarge": _doc(2, 8, "nvlink", 1600.0, 100.0, 128.0, 2.31),
    "ml.hpcpni2.28xlarge": _doc(2, 8, "pcie", 256.0, 100.0, 128.0, 4.0),
    "p4de.24xlarge": _doc(2, 8, "nvlink", 1600.0, 100.0, 128.0, 2.31),
    "a3-highgpu-8g": _doc(2, 8, "nvlink", 1600.0, 100.0, 128.0, 6.09),
    "a3-megagpu-8g": _doc(2, 8, "nvlink", 1600.0, 200.0, 128.0, 6.09),
    "p5.48xlarge": _doc(2, 8, "nvlink", 1600.0, 400.0, 128.0, 9.8),
}
