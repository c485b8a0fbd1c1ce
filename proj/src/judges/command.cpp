#include <fcntl.h>
#include <poll.h>
#include <signal.h>
#include <sys/wait.h>
#include <unistd.h>

#include <cerrno>
#include <chrono>
#include <cstring>
#include <mutex>

#include <fmt/format.h>

#include "evalkit/errors.hpp"
#include "evalkit/judges.hpp"

namespace evalkit {

namespace {

struct Pipe {
  int fd[2] = {-1, -1};
  Pipe() {
    if (::pipe2(fd, O_CLOEXEC) != 0) {
      throw EnvironmentError(fmt::format("pipe failed: {}", std::strerror(errno)));
    }
  }
  ~Pipe() {
    close_read();
    close_write();
  }
  void close_read() {
    if (fd[0] >= 0) ::close(fd[0]);
    fd[0] = -1;
  }
  void close_write() {
    if (fd[1] >= 0) ::close(fd[1]);
    fd[1] = -1;
  }
};

}  // namespace

CommandGenerator::CommandGenerator(std::vector<std::string> argv, double timeout_seconds)
    : argv_(std::move(argv)), timeout_(timeout_seconds) {
  if (argv_.empty()) throw ConfigError("judge command is empty");
  // A child that exits before reading its prompt must not kill this process.
  static std::once_flag ignore_sigpipe;
  std::call_once(ignore_sigpipe, [] { ::signal(SIGPIPE, SIG_IGN); });
}

std::string CommandGenerator::generate(const std::string& prompt) {
  Pipe in;
  Pipe out;
  std::vector<char*> args;
  for (auto& a : argv_) args.push_back(a.data());
  args.push_back(nullptr);

  const pid_t pid = ::fork();
  if (pid < 0) throw EnvironmentError(fmt::format("fork failed: {}", std::strerror(errno)));
  if (pid == 0) {
    ::dup2(in.fd[0], STDIN_FILENO);
    ::dup2(out.fd[1], STDOUT_FILENO);
    ::execvp(args[0], args.data());
    ::_exit(127);
  }
  in.close_read();
  out.close_write();
  ::fcntl(in.fd[1], F_SETFL, O_NONBLOCK);

  const auto deadline = std::chrono::steady_clock::now() + std::chrono::duration<double>(timeout_);
  std::string output;
  std::size_t written = 0;
  if (prompt.empty()) in.close_write();
  char buf[4096];
  bool timed_out = false;
  while (out.fd[0] >= 0) {
    const auto left = std::chrono::duration_cast<std::chrono::milliseconds>(
        deadline - std::chrono::steady_clock::now());
    if (left.count() <= 0) {
      timed_out = true;
      break;
    }
    pollfd fds[2];
    nfds_t n = 0;
    fds[n++] = {out.fd[0], POLLIN, 0};
    if (in.fd[1] >= 0) fds[n++] = {in.fd[1], POLLOUT, 0};
    const int rc = ::poll(fds, n, static_cast<int>(left.count()));
    if (rc < 0 && errno == EINTR) continue;
    if (rc < 0) break;
    if (n == 2 && (fds[1].revents & (POLLOUT | POLLERR | POLLHUP))) {
      const ssize_t w = ::write(in.fd[1], prompt.data() + written, prompt.size() - written);
      if (w > 0) written += static_cast<std::size_t>(w);
      if (w < 0 && errno != EAGAIN) written = prompt.size();
      if (written == prompt.size()) in.close_write();
    }
    if (fds[0].revents & (POLLIN | POLLHUP | POLLERR)) {
      const ssize_t r = ::read(out.fd[0], buf, sizeof buf);
      if (r > 0) {
        output.append(buf, static_cast<std::size_t>(r));
      } else if (r == 0 || errno != EINTR) {
        out.close_read();
      }
    }
  }
  if (timed_out) ::kill(pid, SIGKILL);
  int status = 0;
  while (::waitpid(pid, &status, 0) < 0 && errno == EINTR) {
  }
  if (timed_out) {
    throw RemoteError(fmt::format("judge command '{}' timed out after {:.1f}s", argv_[0], timeout_),
                      0, 1);
  }
  if (!WIFEXITED(status) || WEXITSTATUS(status) != 0) {
    throw RemoteError(fmt::format("judge command '{}' failed with status {}", argv_[0],
                                  WIFEXITED(status) ? WEXITSTATUS(status) : -1),
                      WIFEXITED(status) ? WEXITSTATUS(status) : -1, 1);
  }
  return output;
}

}  // namespace evalkit
