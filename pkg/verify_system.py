#!/usr/bin/env python3
"""
System Verification Script
Checks the environment and the model invariants without training anything
"""
import sys


def print_header(text):
    print("\n" + "=" * 60)
    print(f"  {text}")
    print("=" * 60)


def print_result(name, success, details=""):
    status = "✅ PASS" if success else "❌ FAIL"
    print(f"{status} - {name}")
    if details:
        print(f"      {details}")


def check_python_version():
    version = sys.version_info
    success = version >= (3, 8)
    print_result("Python Version", success, f"Python {version.major}.{version.minor}.{version.micro}")
    return success


def check_dependencies():
    """Check if required packages are installed"""
    print_header("Checking Dependencies")

    packages = {
        "numpy": "numpy",
        "torch": "torch",
        "Pillow": "PIL",
        "python-dotenv": "dotenv",
        "colorama": "colorama",
        "tabulate": "tabulate",
    }

    all_success = True
    for name, import_name in packages.items():
        try:
            __import__(import_name)
            print_result(name, True, "Required")
        except ImportError:
            print_result(name, False, "REQUIRED - pip install " + name)
            all_success = False
    return all_success


def check_skeleton():
    print_header("Checking Bundled Skeleton")
    try:
        from skeleton import build_adjacency, build_couple_graph, load_skeleton

        skeleton = load_skeleton()
        single = build_adjacency(skeleton)
        couple = build_couple_graph(skeleton)
        details = (f"{skeleton.name}: {skeleton.num_joints} joints, "
                   f"nnz {single.nnz} single / {couple.adjacency.nnz} couple")
        print_result("Skeleton", True, details)
        return True
    except Exception as e:
        print_result("Skeleton", False, str(e))
        return False


def check_zero_residual():
    """An untrained network's final pose must equal its initial pose exactly"""
    print_header("Checking Zero-Residual Identity")
    try:
        import torch

        from network import OPECNet
        from skeleton import load_skeleton

        torch.manual_seed(0)
        model = OPECNet(load_skeleton(), couple_graph=True).eval()
        crops = torch.rand((2, model.backbone.in_channels) + model.backbone.crop_size)
        with torch.no_grad():
            out = model(crops)
        success = torch.equal(out.trace.final.coords, out.initial_pose.coords)
        print_result("Final == Initial", success)
        return success
    except Exception as e:
        print_result("Final == Initial", False, str(e))
        return False


def check_gradients():
    print_header("Checking Gradients")
    try:
        import torch

        from backbone import soft_argmax
        from gradients import all_passed, finite_difference_probe, max_relative_error

        gen = torch.Generator().manual_seed(0)
        heatmap = torch.randn(2, 3, 8, 8, generator=gen, dtype=torch.float64)
        probes = finite_difference_probe(lambda h: (soft_argmax(h).coords ** 2).sum(), [heatmap],
                                         num_probes=10, generator=gen)
        success = all_passed(probes)
        print_result("soft_argmax", success, f"max relative error {max_relative_error(probes):.2e}")
        return success
    except Exception as e:
        print_result("soft_argmax", False, str(e))
        return False


def run_checks() -> bool:
    print_header("SYSTEM VERIFICATION")
    results = [
        check_python_version(),
        check_dependencies(),
        check_skeleton(),
        check_zero_residual(),
        check_gradients(),
    ]

    print_header("SUMMARY")
    passed = sum(results)
    print(f"{passed}/{len(results)} checks passed")
    return all(results)


if __name__ == "__main__":
    sys.exit(0 if run_checks() else 1)
