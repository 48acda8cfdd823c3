// gridforge run header for Java programs.
import java.util.ArrayList;
import java.util.Arrays;
import java.util.List;

public final class Header {
    public String appDir = ".";
    public String checkpointDir = "./checkpoint";
    public String outputDir = "./output";
    public int rank = 0;
    public int repetitions = 1;
    public String masterAddr = "127.0.0.1";
    public int masterPort = 0;
    public List<String> parameters = new ArrayList<>();

    public static Header parse(String[] args) {
        Header h = new Header();
        for (int i = 0; i + 1 < args.length; i++) {
            String v = args[i + 1];
            switch (args[i]) {
                case "--app_dir": h.appDir = v; i++; break;
                case "--checkpoint_dir": h.checkpointDir = v; i++; break;
                case "--output_dir": h.outputDir = v; i++; break;
                case "--rank": h.rank = Integer.parseInt(v); i++; break;
                case "--repetitions": h.repetitions = Integer.parseInt(v); i++; break;
                case "--master_addr": h.masterAddr = v; i++; break;
                case "--master_port": h.masterPort = Integer.parseInt(v); i++; break;
                case "--parameters":
                    h.parameters = v.isEmpty() ? new ArrayList<>() : new ArrayList<>(Arrays.asList(v.split(",")));
                    i++;
                    break;
                default: break;
            }
        }
        new java.io.File(h.outputDir).mkdirs();
        new java.io.File(h.checkpointDir).mkdirs();
        return h;
    }
}
