/*
 * Exports decompiled C for every function in the current program.
 *
 * Intended as an analyzeHeadless post-script:
 *
 *   analyzeHeadless <project_dir> <project> -import <binary> -overwrite \
 *       -scriptPath <this directory> \
 *       -postScript ExportDecompiledC.java <output path> -deleteProject
 *
 * Output grammar, one block per function in ascending entry-address order:
 * a "// FUNCTION <name> @ <address>" line followed by the decompiled C,
 * or a "// DECOMPILE FAILED <name>" line when the decompiler gives up.
 * The driving pipeline counts functions by scanning these marker lines,
 * so the prefixes must not change without updating it.
 */

import java.nio.charset.StandardCharsets;
import java.nio.file.Files;
import java.nio.file.Path;
import java.nio.file.Paths;

import ghidra.app.decompiler.DecompInterface;
import ghidra.app.decompiler.DecompileOptions;
import ghidra.app.decompiler.DecompileResults;
import ghidra.app.script.GhidraScript;
import ghidra.program.model.listing.Function;

public class ExportDecompiledC extends GhidraScript {

    // One pathological function must not stall the whole binary.
    private static final int PER_FUNCTION_TIMEOUT_S = 30;

    private static final String FUNCTION_MARKER_PREFIX = "// FUNCTION ";
    private static final String FAILURE_MARKER_PREFIX = "// DECOMPILE FAILED ";

    @Override
    public void run() throws Exception {
        String[] args = getScriptArgs();
        if (args.length < 1) {
            printerr("usage: ExportDecompiledC <output path>");
            System.exit(2);
        }
        Path outputPath = Paths.get(args[0]);

        DecompInterface decompiler = new DecompInterface();
        decompiler.setOptions(new DecompileOptions());
        if (!decompiler.openProgram(currentProgram)) {
            printerr("decompiler rejected program: " + decompiler.getLastMessage());
            System.exit(1);
        }

        int exported = 0;
        int failed = 0;
        StringBuilder out = new StringBuilder();
        try {
            // getFunctions(true) iterates in ascending entry-address order,
            // which keeps the export deterministic for a fixed program.
            for (Function function : currentProgram.getFunctionManager().getFunctions(true)) {
                if (monitor.isCancelled()) {
                    break;
                }
                DecompileResults results =
                    decompiler.decompileFunction(function, PER_FUNCTION_TIMEOUT_S, monitor);
                String c = null;
                if (results != null && results.decompileCompleted()
                        && results.getDecompiledFunction() != null) {
                    c = results.getDecompiledFunction().getC();
                }
                if (c != null) {
                    out.append(FUNCTION_MARKER_PREFIX)
                        .append(function.getName())
                        .append(" @ ")
                        .append(function.getEntryPoint())
                        .append('\n')
                        .append(c)
                        .append('\n');
                    exported++;
                } else {
                    out.append(FAILURE_MARKER_PREFIX)
                        .append(function.getName())
                        .append('\n');
                    failed++;
                }
            }
        } finally {
            decompiler.dispose();
        }

        // Written before the status decision so a zero-function run still
        // leaves an inspectable (possibly empty) file behind.
        Files.write(outputPath, out.toString().getBytes(StandardCharsets.UTF_8));
        println("exported " + exported + " function(s), " + failed + " failed, to " + args[0]);
        if (exported == 0) {
            // System.exit is the only reliable way for a post-script to
            // surface a nonzero analyzeHeadless exit status.
            System.exit(1);
        }
    }
}
