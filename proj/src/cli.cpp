// SPDX-License-Identifier: Apache-2.0
#include <fstream>
#include <iostream>
#include <iterator>
#include <ostream>

#include <CLI11.hpp>

#include "finsent/errors.hpp"
#include "finsent/pipeline.hpp"
#include "finsent/synth.hpp"

namespace finsent {

namespace {

KeyValueConfig gather_config(const std::string& file, const std::vector<std::string>& assignments) {
  KeyValueConfig kv;
  if (!file.empty()) kv = KeyValueConfig::load(file);
  for (const auto& a : assignments) kv.set_assignment(a);
  return kv;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Financial sentiment fine-tuning toolkit"};
  app.require_subcommand(1);

  std::string config_file;
  std::vector<std::string> assignments;
  auto add_config_flags = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_file, "key = value config file");
    cmd->add_option("--set", assignments, "override, key=value (repeatable)");
  };

  std::string data_path, out_dir;
  auto* prepare = app.add_subcommand("prepare", "load, split, tokenize and pack a PhraseBank file");
  prepare->add_option("--data", data_path, "sentence@label file")->required();
  prepare->add_option("--out", out_dir, "run directory")->required();
  add_config_flags(prepare);

  std::string mode = "sft";
  auto* train = app.add_subcommand("train", "fine-tune on a prepared run directory");
  train->add_option("--mode", mode, "sft or classhead")->check(CLI::IsMember({"sft", "classhead"}));
  train->add_option("--out", out_dir, "run directory")->required();
  add_config_flags(train);

  std::string ckpt_path, split_name = "test";
  double min_accuracy = -1.0;
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a split");
  eval->add_option("--mode", mode, "fewshot, sft or classhead")
      ->check(CLI::IsMember({"fewshot", "sft", "classhead"}));
  eval->add_option("--out", out_dir, "run directory")->required();
  eval->add_option("--ckpt", ckpt_path, "checkpoint (default: the run's checkpoint for the mode)");
  eval->add_option("--split", split_name, "train, val or test");
  auto* gate = eval->add_option("--min-accuracy", min_accuracy, "fail with exit code 5 below this accuracy");

  std::string title, template_path;
  bool fewshot = false;
  auto* prompt = app.add_subcommand("prompt", "print the prompt for a news title");
  prompt->add_option("--title", title, "news title")->required();
  prompt->add_flag("--fewshot", fewshot, "include the three answered exemplars");
  prompt->add_option("--template", template_path, "template file");

  auto* extract = app.add_subcommand("extract-title", "read a prompt on stdin and print its query title");

  std::size_t synth_n = 4845;
  std::uint64_t synth_seed = 1;
  bool latin1 = false;
  std::string synth_out;
  auto* synth = app.add_subcommand("synth", "write a synthetic PhraseBank-format corpus");
  synth->add_option("--n", synth_n, "number of sentences");
  synth->add_option("--seed", synth_seed, "generator seed");
  synth->add_flag("--latin1", latin1, "ISO-8859-1 output");
  synth->add_option("--output", synth_out, "output file")->required();

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  if (!reversed.empty()) reversed.pop_back();
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (*prepare) {
      cmd_prepare({data_path, out_dir, gather_config(config_file, assignments)}, out);
    } else if (*train) {
      cmd_train({parse_eval_mode(mode), out_dir, gather_config(config_file, assignments)}, out);
    } else if (*eval) {
      EvalOptions opts;
      opts.mode = parse_eval_mode(mode);
      opts.out = out_dir;
      if (!ckpt_path.empty()) opts.checkpoint = ckpt_path;
      opts.split = split_name;
      if (gate->count() > 0) opts.min_accuracy = min_accuracy;
      cmd_eval(opts, out);
      std::ifstream table(std::filesystem::path(out_dir) / "report.txt");
      out << table.rdbuf();
    } else if (*prompt) {
      std::optional<std::filesystem::path> tpl;
      if (!template_path.empty()) tpl = template_path;
      out << cmd_prompt(title, fewshot, tpl);
    } else if (*extract) {
      const std::string text{std::istreambuf_iterator<char>(std::cin), std::istreambuf_iterator<char>()};
      const auto found = extract_last_title(text);
      if (!found) throw DataError("no 'News Title:' line in the prompt");
      out << *found << "\n";
    } else if (*synth) {
      std::ofstream file(synth_out, std::ios::binary | std::ios::trunc);
      if (!file) throw DataError("cannot write " + synth_out);
      file << generate_toy_phrasebank(synth_n, synth_seed, latin1);
    }
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return exit_code_for(e);
  }
  return 0;
}

}  // namespace finsent
