#include <cstdio>
#include <sys/wait.h>

#include <gtest/gtest.h>

#include "support.hpp"

using namespace forge;
using namespace forge::testing;

namespace {

struct Outcome {
    int code = -1;
    std::string out;
};

Outcome forge_cli(const std::string& args) {
    Outcome o;
    std::string cmd = std::string(FORGE_BIN) + " " + args + " 2>&1";
    FILE* p = popen(cmd.c_str(), "r");
    if (!p) return o;
    char buf[4096];
    while (auto n = fread(buf, 1, sizeof buf, p)) o.out.append(buf, n);
    int st = pclose(p);
    o.code = WIFEXITED(st) ? WEXITSTATUS(st) : -1;
    return o;
}

std::string e2e_config_path() { return (fixtures_dir() / "e2e" / "config.json").string(); }

}  // namespace

TEST(Cli, DryRunListsStagesWithoutRunDir) {
    TempDir dir("cli");
    auto r = forge_cli("run --config " + e2e_config_path() + " --run-dir " + (dir / "run").string() + " --dry-run");
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("stage1"), std::string::npos);
    EXPECT_NE(r.out.find("stage7"), std::string::npos);
    EXPECT_FALSE(std::filesystem::exists(dir / "run" / "exchanges"));
}

TEST(Cli, ConfigErrorsExitTwo) {
    TempDir dir("cli");
    EXPECT_EQ(forge_cli("run --config " + (dir / "missing.json").string()).code, 2);
    auto bad = json::parse(read_file(fixtures_dir() / "e2e" / "config.json"));
    bad["workers"] = 0;
    write_json(dir / "bad.json", bad);
    EXPECT_EQ(forge_cli("run --config " + (dir / "bad.json").string() + " --run-dir " + (dir / "r").string()).code, 2);
    EXPECT_EQ(forge_cli("run --config " + e2e_config_path() + " --partition nonsense").code, 2);
}

TEST(Cli, EndToEndFlow) {
    TempDir dir("cli");
    const auto run = (dir / "run").string();
    const auto cfg = e2e_config_path();

    auto r = forge_cli("run --config " + cfg + " --run-dir " + run);
    ASSERT_EQ(r.code, 0) << r.out;
    EXPECT_NE(r.out.find("exported"), std::string::npos);
    EXPECT_TRUE(std::filesystem::exists(dir / "run" / "export" / "benchmark.jsonl"));

    auto e = forge_cli("eval --config " + cfg + " --run-dir " + run + " --mode generate");
    ASSERT_EQ(e.code, 0) << e.out;
    EXPECT_NE(e.out.find("agent-a (generate): overall"), std::string::npos);

    auto p = forge_cli("eval --config " + cfg + " --run-dir " + run + " --mode perplexity --agent agent-a");
    ASSERT_EQ(p.code, 0) << p.out;

    // The strong agent's script declares no logprobs.
    auto cap = forge_cli("eval --config " + cfg + " --run-dir " + run + " --mode perplexity --agent strong");
    EXPECT_EQ(cap.code, 2) << cap.out;
    EXPECT_NE(cap.out.find("capability"), std::string::npos);

    auto a = forge_cli("analyze --config " + cfg + " --run-dir " + run + " --taxonomy error_category --full-set");
    ASSERT_EQ(a.code, 0) << a.out;
    EXPECT_NE(a.out.find("labeled"), std::string::npos);

    auto rep = forge_cli("report --run-dir " + run);
    ASSERT_EQ(rep.code, 0) << rep.out;
    EXPECT_NE(rep.out.find("agent-a"), std::string::npos);

    auto x = forge_cli("export --run-dir " + run + " --out " + (dir / "copy").string());
    ASSERT_EQ(x.code, 0) << x.out;
    EXPECT_EQ(read_file(dir / "copy" / "benchmark.jsonl"), read_file(dir / "run" / "export" / "benchmark.jsonl"));
}

TEST(Cli, ExportOutsideRunIsConfigError) {
    TempDir dir("cli");
    EXPECT_EQ(forge_cli("export --run-dir " + dir.path().string()).code, 2);
}
