# app/main.py

import argparse
import json
import logging
import os
import sys
from typing import List, Optional

PROJECT_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if PROJECT_ROOT not in sys.path:
    sys.path.append(PROJECT_ROOT)

from config import settings  # noqa: E402
from data.data_loader import load_schema, load_scm_spec  # noqa: E402
from model.classifiers import Classifier, loan_classifier, school_classifier  # noqa: E402
from model.synthetic_generator import (  # noqa: E402
    LoanScenarioParams,
    SchoolScenarioParams,
    generate_loan,
    generate_school_scenario,
)
from services.counterfactual_service import abduct, generate_counterfactual_dataset  # noqa: E402
from services.dataset_service import load_dataset  # noqa: E402
from services.detector_service import METHODS  # noqa: E402
from services.pipeline_service import load_manifest, report, run_audit, run_sweep  # noqa: E402
from services.scm_service import fit_scm  # noqa: E402
from utils.exceptions import AuditError, ClassifierError  # noqa: E402

logger = logging.getLogger(__name__)


def _write_json(document: dict, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        json.dump(document, f, ensure_ascii=False, indent=2)
        f.write("\n")


def _load_classifier(value: str) -> Classifier:
    builtin = {"loan": loan_classifier, "law_school": school_classifier}
    if value in builtin:
        return builtin[value]()
    try:
        with open(value, "r", encoding="utf-8") as f:
            return Classifier.parse(json.load(f))
    except (FileNotFoundError, json.JSONDecodeError) as e:
        raise ClassifierError(f"無法讀取分類器設定 {value}: {e}") from e


def cmd_generate(args: argparse.Namespace) -> None:
    os.makedirs(args.out, exist_ok=True)
    overrides = {"seed": args.seed if args.seed is not None else settings.default_seed}
    if args.n is not None:
        overrides["n"] = args.n
    if args.scenario == "loan":
        d, noise, truth = generate_loan(LoanScenarioParams.build(**overrides))
    else:
        d, noise, truth = generate_school_scenario(SchoolScenarioParams.build(**overrides))
    d.to_csv(os.path.join(args.out, "dataset.csv"))
    noise.to_csv(os.path.join(args.out, "noise.csv"))
    _write_json(truth.to_dict(), os.path.join(args.out, "ground_truth_scm.json"))


def cmd_fit_scm(args: argparse.Namespace) -> None:
    os.makedirs(args.out, exist_ok=True)
    d = load_dataset(args.data, load_schema(args.schema), args.delimiter)
    fitted = fit_scm(load_scm_spec(args.scm), d)
    _write_json(fitted.to_dict(), os.path.join(args.out, "fitted_scm.json"))


def cmd_cfgen(args: argparse.Namespace) -> None:
    os.makedirs(args.out, exist_ok=True)
    d = load_dataset(args.data, load_schema(args.schema), args.delimiter)
    fitted = fit_scm(load_scm_spec(args.scm), d)
    noise = abduct(fitted, d)
    cf = generate_counterfactual_dataset(fitted, d, {attr: 0 for attr in args.attr}, _load_classifier(args.classifier),
                                         noise=noise)
    cf.to_csv(os.path.join(args.out, "counterfactual.csv"), args.delimiter)
    noise.to_csv(os.path.join(args.out, "noise.csv"))


def _manifest_overrides(args: argparse.Namespace) -> dict:
    return {
        "k": tuple(args.k) if args.k else None,
        "alpha": args.alpha,
        "tau": args.tau,
        "methods": tuple(args.method) if args.method else None,
        "mode": args.mode,
        "direction": args.direction,
        "include_centers": True if args.include_centers else None,
        "epsilon": args.epsilon,
        "seed": args.seed,
        "output_dir": args.out,
    }


def cmd_audit(args: argparse.Namespace) -> None:
    run_audit(load_manifest(args.manifest, **_manifest_overrides(args)))


def cmd_sweep(args: argparse.Namespace) -> None:
    manifest = load_manifest(args.manifest, **_manifest_overrides(args))
    k_range = None
    if args.k_start is not None or args.k_stop is not None or args.k_step is not None:
        start = args.k_start or manifest.sweep.start
        stop = args.k_stop or manifest.sweep.stop
        step = args.k_step or manifest.sweep.step
        k_range = list(range(start, stop + 1, step))
    run_sweep(manifest, k_range)


def cmd_report(args: argparse.Namespace) -> None:
    report(args.out)


def _add_override_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--manifest", required=True, help="執行清單 (JSON)")
    parser.add_argument("--k", type=int, nargs="+", help="覆寫 k 清單")
    parser.add_argument("--alpha", type=float)
    parser.add_argument("--tau", type=float)
    parser.add_argument("--method", nargs="+", choices=METHODS)
    parser.add_argument("--mode", choices=["single", "multiple", "intersectional"])
    parser.add_argument("--direction", choices=["negative", "positive"])
    parser.add_argument("--include-centers", action="store_true", help="ST 納入搜尋中心 (消融實驗)")
    parser.add_argument("--epsilon", type=float)
    parser.add_argument("--seed", type=int)
    parser.add_argument("--out", help="輸出目錄")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cst-audit", description="以反事實情境測試稽核個體歧視。")
    sub = parser.add_subparsers(dest="command", required=True)

    generate = sub.add_parser("generate", help="產生內建情境的合成資料")
    generate.add_argument("--scenario", choices=["loan", "law_school"], required=True)
    generate.add_argument("--n", type=int)
    generate.add_argument("--seed", type=int)
    generate.add_argument("--out", default=settings.output_dir)
    generate.set_defaults(handler=cmd_generate)

    for name, handler, help_text in (("fit-scm", cmd_fit_scm, "估計 SCM 的結構方程式"),
                                     ("cfgen", cmd_cfgen, "產生反事實資料集")):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--data", required=True)
        p.add_argument("--schema", required=True)
        p.add_argument("--scm", required=True)
        p.add_argument("--delimiter", default=",")
        p.add_argument("--out", default=settings.output_dir)
        if name == "cfgen":
            p.add_argument("--attr", nargs="+", required=True, help="介入 do(A := 0) 的受保護屬性")
            p.add_argument("--classifier", required=True, help="'loan'、'law_school' 或分類器設定 JSON 路徑")
        p.set_defaults(handler=handler)

    audit = sub.add_parser("audit", help="依執行清單執行所有方法與 k")
    _add_override_flags(audit)
    audit.set_defaults(handler=cmd_audit)

    sweep = sub.add_parser("sweep", help="k 掃描，輸出長格式 CSV")
    _add_override_flags(sweep)
    sweep.add_argument("--k-start", type=int)
    sweep.add_argument("--k-stop", type=int)
    sweep.add_argument("--k-step", type=int)
    sweep.set_defaults(handler=cmd_sweep)

    rep = sub.add_parser("report", help="由 JSONL 重新產生彙總表")
    rep.add_argument("--out", default=settings.output_dir)
    rep.set_defaults(handler=cmd_report)
    return parser


def _error_record(e: Exception) -> dict:
    details = {key: getattr(e, key) for key in ("row", "column", "cycle") if getattr(e, key, None) is not None}
    return {"error": type(e).__name__, "message": str(e), "details": details}


def main(argv: Optional[List[str]] = None) -> int:
    logging.basicConfig(level=settings.log_level, format='%(asctime)s - %(name)s - %(levelname)s - %(message)s')
    args = build_parser().parse_args(argv)
    try:
        args.handler(args)
    except AuditError as e:
        logger.error(f"--- ❌ [CLI] {args.command} 失敗: {e} ---", exc_info=True)
        record = _error_record(e)
        out = getattr(args, "out", None) or settings.output_dir
        os.makedirs(out, exist_ok=True)
        _write_json(record, os.path.join(out, "error.json"))
        sys.stderr.write(json.dumps(record, ensure_ascii=False) + "\n")
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
