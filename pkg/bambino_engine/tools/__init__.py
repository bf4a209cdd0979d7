from .pipeline import cmd_gen_data, cmd_pretrain, cmd_continual, cmd_eval
from .ablation import cmd_report, summarize_ablation

__all__ = ["cmd_gen_data", "cmd_pretrain", "cmd_continual", "cmd_eval",
           "cmd_report", "summarize_ablation"]
