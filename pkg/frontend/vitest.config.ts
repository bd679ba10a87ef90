import { defineConfig } from "vitest/config";

export default defineConfig({
  test: {
    environment: "happy-dom",
    include: ["test/**/*.test.ts"],
    // The e2e file boots the real backend; give it room on slow machines.
    testTimeout: 60_000,
    hookTimeout: 60_000,
  },
});
