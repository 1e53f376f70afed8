#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <iostream>
#include <map>

#include "latentlens/commands.hpp"
#include "latentlens/error.hpp"
#include "latentlens/runtime.hpp"

using namespace latentlens;

namespace {

const std::map<std::string, std::string> kHelp = {
    {"seed", "root RNG seed"},
    {"out", "output directory"},
    {"data", "LLDS dataset file"},
    {"n", "number of phantoms"},
    {"size", "image height and width"},
    {"noise", "texture noise on/off"},
    {"model", "vae or gan"},
    {"epochs", "training epochs"},
    {"batch", "batch size"},
    {"latent_dim", "latent dimension d"},
    {"channels", "base channel count"},
    {"k", "number of directions K"},
    {"mode", "unit or orthonormal"},
    {"reconstructor", "lenet or resnet"},
    {"gamma", "weight of the shift regression loss"},
    {"alpha_max", "largest |alpha|"},
    {"iters", "direction training iterations"},
    {"port", "HTTP port"},
    {"checkpoint", "model checkpoint (LLCK)"},
    {"directions", "directions checkpoint (LLCK with .json sidecar)"},
    {"extractor", "VAE checkpoint whose encoder scores Frechet distance"},
    {"random_baseline", "also score random unit directions"},
    {"check_constraints", "abort if a column constraint is violated after any step"},
    {"constraint_every", "constraints.csv sampling interval in steps"},
};

std::string flag_name(const std::string& key) {
  std::string s = key;
  for (auto& c : s)
    if (c == '_') c = '-';
  return "--" + s;
}

}  // namespace

int main(int argc, char** argv) {
  tune_allocator();
  CLI::App app{"latentlens: interpretable latent directions for synthetic thorax phantoms"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path;
  std::vector<std::string> sets;
  app.add_option("--config", config_path, "key=value file or a config.json snapshot")->check(CLI::ExistingFile);
  app.add_option("--set", sets, "extra key=value override (repeatable)");

  std::map<std::string, std::map<std::string, std::string>> flag_values;
  std::map<std::string, CLI::App*> subs;
  for (auto name : kCommands) {
    const std::string command(name);
    CLI::App* sub = app.add_subcommand(command);
    subs[command] = sub;
    auto& values = flag_values[command];
    for (const auto& key : command_keys(command)) {
      const auto help = kHelp.contains(key) ? kHelp.at(key) : std::string("setting '" + key + "'");
      if (key == "noise" || key == "random_baseline" || key == "check_constraints") {
        sub->add_flag(flag_name(key) + "{true},!--no-" + flag_name(key).substr(2), values[key], help);
      } else {
        sub->add_option(flag_name(key), values[key], help);
      }
    }
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : static_cast<int>(ErrorCategory::config);
  }

  std::string command;
  for (const auto& [name, sub] : subs)
    if (sub->parsed()) command = name;
  const auto started = std::chrono::steady_clock::now();
  auto log = [&](const std::string& line) {
    const double t = std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
    std::fprintf(stderr, "[%7.1fs] %s\n", t, line.c_str());
  };
  try {
    apply_thread_limit();
    Settings file = config_path.empty() ? Settings() : read_settings_file(config_path);
    Settings overrides;
    for (const auto& [key, value] : flag_values[command])
      if (subs[command]->get_option(flag_name(key))->count() > 0) overrides.set(key, value);
    for (const auto& kv : sets) {
      const Settings one = parse_key_values(kv);
      for (const auto& [k, v] : one.values()) overrides.set(k, v);
    }
    const Settings settings = resolve_settings(command, file, overrides);
    run_command(command, settings, log);
  } catch (const Error& e) {
    std::fprintf(stderr, "error[%s]: %s\n", std::string(category_name(e.category())).c_str(), e.what());
    return static_cast<int>(e.category());
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error[internal]: %s\n", e.what());
    return 1;
  }
  return 0;
}
